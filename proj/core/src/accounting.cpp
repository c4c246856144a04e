#include "deskgrid/accounting.hpp"

#include <cmath>

namespace deskgrid::acct {

using nlohmann::json;

json UsageRecord::to_json() const {
    return json{{"user_id", user_id},       {"app_id", app_id},
                {"job_id", job_id},         {"node_id", node_id},
                {"started_at", started_at}, {"ended_at", ended_at},
                {"charged_seconds", charged_seconds}};
}

UsageRecord UsageRecord::from_json(const json& doc) {
    UsageRecord r;
    r.user_id = doc.value("user_id", "");
    r.app_id = doc.value("app_id", "");
    r.job_id = doc.value("job_id", "");
    r.node_id = doc.value("node_id", "");
    r.started_at = doc.value("started_at", std::int64_t{0});
    r.ended_at = doc.value("ended_at", std::int64_t{0});
    r.charged_seconds = doc.value("charged_seconds", std::int64_t{0});
    return r;
}

double price(const std::vector<UsageRecord>& records, const Tariff& tariff) {
    if (tariff.granularity_s <= 0) return 0.0;
    double total = 0.0;
    for (const auto& record : records) {
        std::int64_t units = (record.charged_seconds + tariff.granularity_s - 1) / tariff.granularity_s;
        total += static_cast<double>(units) * tariff.rate;
    }
    return total;
}

void Ledger::record(const std::string& user_id, const std::string& app_id, const std::string& job_id,
                    const std::string& node_id, TimestampMs started_at, TimestampMs ended_at) {
    if (started_at <= 0) return;  // never reached running
    if (ended_at < started_at) ended_at = started_at;
    UsageRecord r;
    r.user_id = user_id;
    r.app_id = app_id;
    r.job_id = job_id;
    r.node_id = node_id;
    r.started_at = started_at;
    r.ended_at = ended_at;
    r.charged_seconds = (ended_at - started_at + 999) / 1000;  // round up to whole seconds
    records_.push_back(std::move(r));
}

std::vector<UsageRecord> Ledger::for_user(const std::string& user_id) const {
    std::vector<UsageRecord> out;
    for (const auto& r : records_) {
        if (r.user_id == user_id) out.push_back(r);
    }
    return out;
}

std::vector<UsageRecord> Ledger::for_node(const std::string& node_id) const {
    std::vector<UsageRecord> out;
    for (const auto& r : records_) {
        if (r.node_id == node_id) out.push_back(r);
    }
    return out;
}

std::int64_t Ledger::charged_seconds_on(const std::string& node_id) const {
    std::int64_t total = 0;
    for (const auto& r : records_) {
        if (r.node_id == node_id) total += r.charged_seconds;
    }
    return total;
}

json Ledger::snapshot() const {
    json records = json::array();
    for (const auto& r : records_) records.push_back(r.to_json());
    return json{{"records", records}};
}

void Ledger::restore(const json& state) {
    records_.clear();
    for (const auto& doc : state.value("records", json::array())) {
        records_.push_back(UsageRecord::from_json(doc));
    }
}

void AccountingService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    tariff_.granularity_s = ctx.opt_int("tariff_granularity_s", 3600);
    if (ctx.options().contains("tariff_rate") && ctx.options()["tariff_rate"].is_number()) {
        tariff_.rate = ctx.options()["tariff_rate"].get<double>();
    }
}

Result<Bytes> AccountingService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "acct.record") {
        ledger_.record(body.value("user_id", ""), body.value("app_id", ""), body.value("job_id", ""),
                       body.value("node_id", ""), body.value("started_at", std::int64_t{0}),
                       body.value("ended_at", std::int64_t{0}));
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "acct.query") {
        std::string user = body.value("user_id", "");
        std::string node = body.value("node_id", "");
        json records = json::array();
        for (const auto& r : ledger_.records()) {
            if (!user.empty() && r.user_id != user) continue;
            if (!node.empty() && r.node_id != node) continue;
            records.push_back(r.to_json());
        }
        return to_bytes(json{{"records", records}}.dump());
    }
    if (request.kind == "acct.price") {
        Tariff tariff = tariff_;
        if (body.contains("granularity_s")) tariff.granularity_s = body["granularity_s"].get<std::int64_t>();
        if (body.contains("rate")) tariff.rate = body["rate"].get<double>();
        std::vector<UsageRecord> records;
        if (body.contains("records")) {
            for (const auto& doc : body["records"]) records.push_back(UsageRecord::from_json(doc));
        } else {
            std::string user = body.value("user_id", "");
            records = user.empty() ? ledger_.records() : ledger_.for_user(user);
        }
        return to_bytes(json{{"total", price(records, tariff)},
                             {"records", records.size()},
                             {"granularity_s", tariff.granularity_s},
                             {"rate", tariff.rate}}
                            .dump());
    }
    return make_error(errc::invalid_request, "unknown accounting verb: " + request.kind);
}

json AccountingService::snapshot_state() { return ledger_.snapshot(); }

void AccountingService::restore_state(const json& state) { ledger_.restore(state); }

}  // namespace deskgrid::acct
