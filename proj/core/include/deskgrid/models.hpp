#pragma once

#include "deskgrid/appmodel.hpp"
#include "deskgrid/storage.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace deskgrid::models {

// ---------------------------------------------------------------------------
// Task model: bags of mutually independent tasks
// ---------------------------------------------------------------------------

struct TaskUnit {
    std::string operation;
    nlohmann::json parameters = nlohmann::json::object();
    store::StagingPlan staging;
    int max_attempts = 3;
};

// The predefined shell-level tasks.
TaskUnit run_process_task(const std::string& command, const std::vector<std::string>& args);
TaskUnit copy_file_task(const std::string& src, const std::string& dst);
TaskUnit rename_file_task(const std::string& from, const std::string& to);
TaskUnit delete_file_task(const std::string& path);

struct TaskResult {
    std::string unit_id;
    exec::JobState state = exec::JobState::Created;
    Bytes result;
    std::string failure_cause;
};

/// Submits the bag; waits for all results unless fire_and_forget, in which
/// case it returns right after the submit ack. Per-task failures are
/// reported individually; the bag never fails atomically.
Result<std::vector<TaskResult>> run_tasks(app::Application& app, const std::vector<TaskUnit>& tasks,
                                          bool fire_and_forget = false, int timeout_ms = -1);

// ---------------------------------------------------------------------------
// Thread model: remote units with a local-thread API surface
// ---------------------------------------------------------------------------

enum class ThreadState { Created, Started, Running, Finished, Aborted };
const char* thread_state_name(ThreadState state);

/// A unit that lives like a thread: create, start, join, abort. The remote
/// error surfaces at join.
class RemoteThread {
public:
    RemoteThread(app::Application& app, std::string operation, Bytes parameters);

    Status start();
    Result<Bytes> join(int timeout_ms = -1);
    Status abort();

    ThreadState state() const { return state_; }
    const std::string& unit_id() const { return unit_id_; }

private:
    app::Application& app_;
    std::string operation_;
    Bytes parameters_;
    std::string unit_id_;
    ThreadState state_ = ThreadState::Created;
};

// ---------------------------------------------------------------------------
// MapReduce model: runtime-generated jobs
// ---------------------------------------------------------------------------

struct KeyValuePair {
    Bytes key;
    Bytes value;
    bool operator==(const KeyValuePair&) const = default;
};

/// Record framing for intermediate and output files: 4-byte big-endian key
/// length, key bytes, 4-byte big-endian value length, value bytes, repeated.
Bytes encode_kv_records(const std::vector<KeyValuePair>& pairs);
Result<std::vector<KeyValuePair>> decode_kv_records(const Bytes& data);

/// Deterministic, stable across nodes: FNV-1a 64-bit of the key, mod R.
int partition(const Bytes& key, int reducer_count);

using MapFn = std::function<std::vector<KeyValuePair>(const std::string& input_name, const Bytes& content)>;
using ReduceFn = std::function<std::vector<KeyValuePair>(const Bytes& key, const std::vector<Bytes>& values)>;

/// Mapper/reducer functions are compiled in and named, like executor
/// operations; job payloads reference them by name.
class MapReduceRegistry {
public:
    static MapReduceRegistry& instance();
    void add_mapper(const std::string& name, MapFn fn);
    void add_reducer(const std::string& name, ReduceFn fn);
    Result<MapFn> mapper(const std::string& name) const;
    Result<ReduceFn> reducer(const std::string& name) const;
    bool has_mapper(const std::string& name) const;
    bool has_reducer(const std::string& name) const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, MapFn> mappers_;
    std::map<std::string, ReduceFn> reducers_;
};

/// Registers the mr.map / mr.reduce executor operations and the built-in
/// mapper/reducer set (wordcount_map, wordcount_reduce, identity_map,
/// identity_reduce). Idempotent.
void register_mapreduce_builtins();

struct MapReduceConfig {
    std::string mapper;
    std::string reducer;
    int reducer_count = 1;
    std::vector<store::FileDescriptor> inputs;
    store::DataChannelSpec output_channel;
    /// Intermediate pairs ride here; defaults to output_channel when the
    /// scheme is empty.
    store::DataChannelSpec intermediate_channel;
};

struct MapReduceStats {
    std::int64_t pairs_mapped = 0;
    std::int64_t pairs_reduced_in = 0;
    std::int64_t output_pairs = 0;
};

/// Runs the two phases: one map job per input file, a barrier, then R reduce
/// jobs (bucket i merges every mapper's bucket i, sorts keys bytewise,
/// groups, reduces into part-r-<i>). Returns the R output descriptors.
Result<std::vector<store::FileDescriptor>> mapreduce_run(app::Application& app, const MapReduceConfig& config,
                                                         MapReduceStats* stats = nullptr,
                                                         int timeout_ms = -1);

}  // namespace deskgrid::models
