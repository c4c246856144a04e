#include "deskgrid/models.hpp"

#include "deskgrid/wire.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>

namespace deskgrid::models {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Task model
// ---------------------------------------------------------------------------

TaskUnit run_process_task(const std::string& command, const std::vector<std::string>& args) {
    TaskUnit unit;
    unit.operation = "run_process";
    unit.parameters = {{"command", command}, {"args", args}};
    return unit;
}

TaskUnit copy_file_task(const std::string& src, const std::string& dst) {
    return TaskUnit{"copy_file", {{"src", src}, {"dst", dst}}, {}, 3};
}

TaskUnit rename_file_task(const std::string& from, const std::string& to) {
    return TaskUnit{"rename_file", {{"from", from}, {"to", to}}, {}, 3};
}

TaskUnit delete_file_task(const std::string& path) {
    return TaskUnit{"delete_file", {{"path", path}}, {}, 3};
}

Result<std::vector<TaskResult>> run_tasks(app::Application& app, const std::vector<TaskUnit>& tasks,
                                          bool fire_and_forget, int timeout_ms) {
    std::vector<std::string> ids;
    for (const auto& task : tasks) {
        auto id = app.add_unit(task.operation, to_bytes(task.parameters.dump()), task.staging,
                               task.max_attempts);
        if (!id) return id.error();
        ids.push_back(id.value());
    }
    if (auto st = app.submit(); !st) return st.error();
    if (fire_and_forget) return std::vector<TaskResult>{};

    auto final_states = app.wait(timeout_ms);
    if (!final_states) return final_states.error();
    std::vector<TaskResult> results;
    for (const auto& id : ids) {
        auto it = final_states.value().find(id);
        if (it == final_states.value().end()) continue;
        TaskResult result;
        result.unit_id = id;
        result.state = it->second.state;
        result.result = it->second.result;
        result.failure_cause = it->second.failure_cause;
        results.push_back(std::move(result));
    }
    return results;
}

// ---------------------------------------------------------------------------
// Thread model
// ---------------------------------------------------------------------------

const char* thread_state_name(ThreadState state) {
    switch (state) {
        case ThreadState::Created: return "created";
        case ThreadState::Started: return "started";
        case ThreadState::Running: return "running";
        case ThreadState::Finished: return "finished";
        case ThreadState::Aborted: return "aborted";
    }
    return "?";
}

RemoteThread::RemoteThread(app::Application& app, std::string operation, Bytes parameters)
    : app_(app), operation_(std::move(operation)), parameters_(std::move(parameters)) {}

Status RemoteThread::start() {
    if (state_ != ThreadState::Created) {
        return make_error(errc::already_started, "thread already started");
    }
    auto id = app_.add_unit(operation_, parameters_);
    if (!id) return id.error();
    unit_id_ = id.value();
    if (auto st = app_.submit(); !st) return st;
    state_ = ThreadState::Started;
    return Status::success();
}

Result<Bytes> RemoteThread::join(int timeout_ms) {
    if (state_ == ThreadState::Created) {
        return make_error(errc::not_started, "join before start");
    }
    TimestampMs deadline = timeout_ms < 0 ? -1 : now_ms() + timeout_ms;
    while (true) {
        auto unit = app_.unit(unit_id_);
        if (!unit) return unit.error();
        switch (unit.value().state) {
            case exec::JobState::Completed:
                state_ = ThreadState::Finished;
                return unit.value().result;
            case exec::JobState::Failed:
                state_ = ThreadState::Finished;
                return make_error(errc::operation_error, unit.value().failure_cause);
            case exec::JobState::Aborted:
                state_ = ThreadState::Aborted;
                return make_error(errc::aborted, "thread aborted");
            case exec::JobState::Running:
                state_ = ThreadState::Running;
                break;
            default:
                break;
        }
        if (deadline >= 0 && now_ms() >= deadline) {
            return make_error(errc::join_timeout, "thread still running at join deadline");
        }
        deskgrid::sleep_ms(25);
    }
}

Status RemoteThread::abort() {
    if (state_ == ThreadState::Created) return make_error(errc::not_started, "abort before start");
    auto reply = app_.client().call("scheduler", "exec.abort", json{{"job_id", unit_id_}});
    if (!reply) return reply.error();
    state_ = ThreadState::Aborted;
    return Status::success();
}

// ---------------------------------------------------------------------------
// MapReduce framing and partitioning
// ---------------------------------------------------------------------------

Bytes encode_kv_records(const std::vector<KeyValuePair>& pairs) {
    Bytes out;
    for (const auto& pair : pairs) {
        append_u32_be(out, static_cast<std::uint32_t>(pair.key.size()));
        out.insert(out.end(), pair.key.begin(), pair.key.end());
        append_u32_be(out, static_cast<std::uint32_t>(pair.value.size()));
        out.insert(out.end(), pair.value.begin(), pair.value.end());
    }
    return out;
}

Result<std::vector<KeyValuePair>> decode_kv_records(const Bytes& data) {
    std::vector<KeyValuePair> pairs;
    std::size_t off = 0;
    while (off < data.size()) {
        if (off + 4 > data.size()) return make_error(errc::invalid_envelope, "truncated key length");
        std::uint32_t key_len = read_u32_be(data.data() + off);
        off += 4;
        if (off + key_len > data.size()) return make_error(errc::invalid_envelope, "truncated key");
        Bytes key(data.begin() + off, data.begin() + off + key_len);
        off += key_len;
        if (off + 4 > data.size()) return make_error(errc::invalid_envelope, "truncated value length");
        std::uint32_t value_len = read_u32_be(data.data() + off);
        off += 4;
        if (off + value_len > data.size()) return make_error(errc::invalid_envelope, "truncated value");
        Bytes value(data.begin() + off, data.begin() + off + value_len);
        off += value_len;
        pairs.push_back(KeyValuePair{std::move(key), std::move(value)});
    }
    return pairs;
}

int partition(const Bytes& key, int reducer_count) {
    return static_cast<int>(fnv1a64(key) % static_cast<std::uint64_t>(reducer_count));
}

MapReduceRegistry& MapReduceRegistry::instance() {
    static MapReduceRegistry registry;
    return registry;
}

void MapReduceRegistry::add_mapper(const std::string& name, MapFn fn) {
    std::lock_guard<std::mutex> lock(mutex_);
    mappers_[name] = std::move(fn);
}

void MapReduceRegistry::add_reducer(const std::string& name, ReduceFn fn) {
    std::lock_guard<std::mutex> lock(mutex_);
    reducers_[name] = std::move(fn);
}

Result<MapFn> MapReduceRegistry::mapper(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = mappers_.find(name);
    if (it == mappers_.end()) return make_error(errc::unknown_operation, "no mapper " + name);
    return it->second;
}

Result<ReduceFn> MapReduceRegistry::reducer(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = reducers_.find(name);
    if (it == reducers_.end()) return make_error(errc::unknown_operation, "no reducer " + name);
    return it->second;
}

bool MapReduceRegistry::has_mapper(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return mappers_.count(name) > 0;
}

bool MapReduceRegistry::has_reducer(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return reducers_.count(name) > 0;
}

// ---------------------------------------------------------------------------
// The mr.map / mr.reduce executor operations
// ---------------------------------------------------------------------------

namespace {

Result<Bytes> read_workspace_file(const std::string& workspace, const std::string& name) {
    std::ifstream in(fs::path(workspace) / name, std::ios::binary);
    if (!in) return make_error(errc::not_found, "workspace file missing: " + name);
    return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Status write_workspace_file(const std::string& workspace, const std::string& name, const Bytes& content) {
    fs::path path = fs::path(workspace) / name;
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) return make_error(errc::operation_error, "cannot write workspace file " + name);
    out.write(reinterpret_cast<const char*>(content.data()), static_cast<std::streamsize>(content.size()));
    return Status::success();
}

Result<Bytes> op_mr_map(exec::OperationContext& ctx) {
    json params = json::parse(to_string(ctx.parameters), nullptr, false);
    if (params.is_discarded()) return make_error(errc::invalid_request, "mr.map parameters are not JSON");
    std::string mapper_name = params.value("mapper", "");
    int reducers = params.value("reducers", 1);
    std::string input_name = params.value("input", "");
    std::string bucket_prefix = params.value("bucket_prefix", "");
    if (reducers < 1 || input_name.empty() || bucket_prefix.empty()) {
        return make_error(errc::invalid_request, "mr.map needs input, reducers and bucket_prefix");
    }

    auto mapper = MapReduceRegistry::instance().mapper(mapper_name);
    if (!mapper) return mapper.error();
    auto content = read_workspace_file(ctx.workspace, input_name);
    if (!content) return content.error();

    std::vector<KeyValuePair> pairs;
    try {
        pairs = mapper.value()(input_name, content.value());
    } catch (const std::exception& e) {
        return make_error(errc::operation_error, std::string("mapper threw: ") + e.what());
    }

    std::vector<std::vector<KeyValuePair>> buckets(static_cast<std::size_t>(reducers));
    for (auto& pair : pairs) {
        buckets[static_cast<std::size_t>(partition(pair.key, reducers))].push_back(std::move(pair));
    }
    json per_bucket = json::array();
    for (int i = 0; i < reducers; ++i) {
        const auto& bucket = buckets[static_cast<std::size_t>(i)];
        // Empty buckets are written too: reducers treat a missing file as an
        // integrity failure, not as empty input.
        if (auto st = write_workspace_file(ctx.workspace, bucket_prefix + "/b" + std::to_string(i),
                                           encode_kv_records(bucket));
            !st) {
            return st.error();
        }
        per_bucket.push_back(bucket.size());
    }
    return to_bytes(json{{"pairs", pairs.size()}, {"per_bucket", per_bucket}}.dump());
}

Result<Bytes> op_mr_reduce(exec::OperationContext& ctx) {
    json params = json::parse(to_string(ctx.parameters), nullptr, false);
    if (params.is_discarded()) return make_error(errc::invalid_request, "mr.reduce parameters are not JSON");
    std::string reducer_name = params.value("reducer", "");
    std::string output_name = params.value("output", "");
    std::vector<std::string> bucket_files = params.value("buckets", std::vector<std::string>{});
    if (output_name.empty()) return make_error(errc::invalid_request, "mr.reduce needs an output name");

    auto reducer = MapReduceRegistry::instance().reducer(reducer_name);
    if (!reducer) return reducer.error();

    // Bytewise-lexicographic key order; value order within a key is
    // unspecified and reducers must not depend on it.
    std::map<Bytes, std::vector<Bytes>> groups;
    std::int64_t pairs_read = 0;
    for (const auto& name : bucket_files) {
        auto content = read_workspace_file(ctx.workspace, name);
        if (!content) {
            return make_error(errc::missing_intermediate, "bucket file missing: " + name);
        }
        auto records = decode_kv_records(content.value());
        if (!records) {
            return make_error(errc::missing_intermediate, "bucket file corrupt: " + name);
        }
        for (auto& pair : records.value()) {
            ++pairs_read;
            groups[pair.key].push_back(std::move(pair.value));
        }
    }

    std::vector<KeyValuePair> output;
    std::int64_t distinct_keys = 0;
    for (auto& [key, values] : groups) {
        ++distinct_keys;
        std::vector<KeyValuePair> reduced;
        try {
            reduced = reducer.value()(key, values);
        } catch (const std::exception& e) {
            return make_error(errc::operation_error, std::string("reducer threw: ") + e.what());
        }
        for (auto& pair : reduced) output.push_back(std::move(pair));
    }
    Bytes encoded = encode_kv_records(output);
    if (auto st = write_workspace_file(ctx.workspace, output_name, encoded); !st) return st.error();
    return to_bytes(json{{"pairs_read", pairs_read},
                         {"keys", distinct_keys},
                         {"output_pairs", output.size()},
                         {"output_size", encoded.size()},
                         {"output_digest", sha256_hex(encoded)}}
                        .dump());
}

std::vector<KeyValuePair> wordcount_map(const std::string&, const Bytes& content) {
    std::vector<KeyValuePair> pairs;
    std::string text = to_string(content);
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) {
            pairs.push_back(KeyValuePair{to_bytes(text.substr(start, i - start)), to_bytes("1")});
        }
    }
    return pairs;
}

std::vector<KeyValuePair> wordcount_reduce(const Bytes& key, const std::vector<Bytes>& values) {
    std::int64_t sum = 0;
    for (const auto& value : values) sum += std::stoll(to_string(value));
    return {KeyValuePair{key, to_bytes(std::to_string(sum))}};
}

}  // namespace

void register_mapreduce_builtins() {
    static bool done = [] {
        auto& ops = exec::OperationRegistry::instance();
        ops.add("mr.map", op_mr_map);
        ops.add("mr.reduce", op_mr_reduce);

        auto& mr = MapReduceRegistry::instance();
        mr.add_mapper("wordcount_map", wordcount_map);
        mr.add_reducer("wordcount_reduce", wordcount_reduce);
        mr.add_mapper("identity_map", [](const std::string&, const Bytes& content) {
            auto records = decode_kv_records(content);
            if (!records) throw std::runtime_error("identity_map input is not KV-framed");
            return records.value();
        });
        mr.add_reducer("identity_reduce", [](const Bytes& key, const std::vector<Bytes>& values) {
            std::vector<KeyValuePair> out;
            for (const auto& value : values) out.push_back(KeyValuePair{key, value});
            return out;
        });
        return true;
    }();
    (void)done;
}

// ---------------------------------------------------------------------------
// MapReduce coordinator
// ---------------------------------------------------------------------------

Result<std::vector<store::FileDescriptor>> mapreduce_run(app::Application& app, const MapReduceConfig& config,
                                                         MapReduceStats* stats, int timeout_ms) {
    if (app.model() != "mapreduce") {
        return make_error(errc::unknown_model, "application model must be mapreduce");
    }
    if (config.reducer_count < 1) return make_error(errc::invalid_request, "reducer_count must be >= 1");
    register_mapreduce_builtins();

    store::DataChannelSpec intermediate =
        config.intermediate_channel.scheme.empty() ? config.output_channel : config.intermediate_channel;
    const int reducers = config.reducer_count;

    // Map phase: one job per input file.
    std::vector<std::string> map_ids;
    std::vector<std::string> bucket_prefixes;
    for (std::size_t m = 0; m < config.inputs.size(); ++m) {
        const auto& input = config.inputs[m];
        std::string prefix = "mr/" + app.app_id() + "/m" + std::to_string(m);
        bucket_prefixes.push_back(prefix);

        store::StagingPlan plan;
        store::FileDescriptor staged_input = input;
        staged_input.direction = store::Direction::Input;
        plan.inputs.push_back(staged_input);
        for (int r = 0; r < reducers; ++r) {
            store::FileDescriptor bucket;
            bucket.logical_name = prefix + "/b" + std::to_string(r);
            bucket.channel = intermediate;
            bucket.direction = store::Direction::Output;
            plan.outputs.push_back(bucket);
        }
        json params = {{"mapper", config.mapper},
                       {"reducers", reducers},
                       {"input", input.logical_name},
                       {"bucket_prefix", prefix}};
        auto id = app.add_unit("mr.map", to_bytes(params.dump()), plan);
        if (!id) return id.error();
        map_ids.push_back(id.value());
    }
    if (auto st = app.submit(); !st) return st.error();

    // Barrier: all maps must finish before any reduce starts.
    auto states = app.wait(timeout_ms);
    if (!states) return states.error();
    std::int64_t pairs_mapped = 0;
    for (const auto& id : map_ids) {
        const auto& job = states.value().at(id);
        if (job.state != exec::JobState::Completed) {
            return make_error(errc::operation_error, "map job failed: " + job.failure_cause);
        }
        json result = json::parse(to_string(job.result), nullptr, false);
        if (!result.is_discarded()) pairs_mapped += result.value("pairs", std::int64_t{0});
    }

    // Reduce phase: bucket r pulls every mapper's bucket r.
    std::vector<std::string> reduce_ids;
    for (int r = 0; r < reducers; ++r) {
        store::StagingPlan plan;
        std::vector<std::string> bucket_names;
        for (const auto& prefix : bucket_prefixes) {
            store::FileDescriptor bucket;
            bucket.logical_name = prefix + "/b" + std::to_string(r);
            bucket.channel = intermediate;
            bucket.direction = store::Direction::Input;
            plan.inputs.push_back(bucket);
            bucket_names.push_back(bucket.logical_name);
        }
        store::FileDescriptor part;
        part.logical_name = "mr/" + app.app_id() + "/part-r-" + std::to_string(r);
        part.channel = config.output_channel;
        part.direction = store::Direction::Output;
        plan.outputs.push_back(part);

        json params = {{"reducer", config.reducer},
                       {"output", part.logical_name},
                       {"buckets", bucket_names}};
        auto id = app.add_unit("mr.reduce", to_bytes(params.dump()), plan);
        if (!id) return id.error();
        reduce_ids.push_back(id.value());
    }
    if (auto st = app.submit(); !st) return st.error();

    states = app.wait(timeout_ms);
    if (!states) return states.error();

    std::vector<store::FileDescriptor> outputs;
    std::int64_t pairs_reduced_in = 0;
    std::int64_t output_pairs = 0;
    for (const auto& id : reduce_ids) {
        const auto& job = states.value().at(id);
        if (job.state != exec::JobState::Completed) {
            return make_error(job.failure_cause.find(errc::missing_intermediate) != std::string::npos
                                  ? errc::missing_intermediate
                                  : errc::operation_error,
                              "reduce job failed: " + job.failure_cause);
        }
        json result = json::parse(to_string(job.result), nullptr, false);
        if (!result.is_discarded()) {
            pairs_reduced_in += result.value("pairs_read", std::int64_t{0});
            output_pairs += result.value("output_pairs", std::int64_t{0});
        }
        for (const auto& descriptor : job.outputs) outputs.push_back(descriptor);
    }
    // Every intermediate pair must be consumed exactly once.
    if (pairs_reduced_in != pairs_mapped) {
        return make_error(errc::missing_intermediate,
                          "maps wrote " + std::to_string(pairs_mapped) + " pairs but reduces read " +
                              std::to_string(pairs_reduced_in));
    }
    if (stats) {
        stats->pairs_mapped = pairs_mapped;
        stats->pairs_reduced_in = pairs_reduced_in;
        stats->output_pairs = output_pairs;
    }
    std::sort(outputs.begin(), outputs.end(),
              [](const store::FileDescriptor& a, const store::FileDescriptor& b) {
                  return a.logical_name < b.logical_name;
              });
    return outputs;
}

}  // namespace deskgrid::models
