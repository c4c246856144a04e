#pragma once

#include "deskgrid/container.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace deskgrid::acct {

/// One job execution attempt that reached running. started_at/ended_at are
/// wall-clock milliseconds; charged_seconds is the interval rounded up to
/// whole seconds (the pricing granularity below is applied at price time).
struct UsageRecord {
    std::string user_id;
    std::string app_id;
    std::string job_id;
    std::string node_id;
    TimestampMs started_at = 0;
    TimestampMs ended_at = 0;
    std::int64_t charged_seconds = 0;

    nlohmann::json to_json() const;
    static UsageRecord from_json(const nlohmann::json& doc);
};

struct Tariff {
    std::int64_t granularity_s = 3600;  // per-hour billing by default
    double rate = 1.0;                  // per granularity unit per node
};

/// price = Σ ceil(charged_seconds / granularity_s) × rate
double price(const std::vector<UsageRecord>& records, const Tariff& tariff);

/// Usage book; retries are billed per attempt.
class Ledger {
public:
    /// Ignores attempts that never reached running (started_at <= 0).
    void record(const std::string& user_id, const std::string& app_id, const std::string& job_id,
                const std::string& node_id, TimestampMs started_at, TimestampMs ended_at);

    const std::vector<UsageRecord>& records() const { return records_; }
    std::vector<UsageRecord> for_user(const std::string& user_id) const;
    std::vector<UsageRecord> for_node(const std::string& node_id) const;
    std::int64_t charged_seconds_on(const std::string& node_id) const;

    nlohmann::json snapshot() const;
    void restore(const nlohmann::json& state);

private:
    std::vector<UsageRecord> records_;
};

/// Kinds: acct.record (from the scheduler), acct.query, acct.price.
class AccountingService : public Service {
public:
    void start(ServiceContext& ctx) override;
    Result<Bytes> handle(const Envelope& request) override;
    nlohmann::json snapshot_state() override;
    void restore_state(const nlohmann::json& state) override;

private:
    ServiceContext* ctx_ = nullptr;
    Ledger ledger_;
    Tariff tariff_;
};

}  // namespace deskgrid::acct
