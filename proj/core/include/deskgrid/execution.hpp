#pragma once

#include "deskgrid/container.hpp"
#include "deskgrid/reservation.hpp"
#include "deskgrid/storage.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace deskgrid::exec {

enum class JobState { Created, Queued, Staging, Running, Completed, Failed, Aborted };
const char* job_state_name(JobState state);
JobState job_state_from_name(const std::string& name);
bool is_terminal(JobState state);
/// The job lifecycle edge relation; everything else is illegal.
bool legal_transition(JobState from, JobState to);

/// One schedulable unit of work. The payload names a pre-registered executor
/// operation plus opaque parameter bytes; nothing mobile ever crosses the
/// wire.
struct JobDescriptor {
    std::string job_id;
    std::string app_id;
    std::string model = "task";  // task | thread | mapreduce
    std::string operation;
    Bytes parameters;
    store::StagingPlan staging;
    JobState state = JobState::Created;
    std::string assigned_node;
    int attempts = 0;
    int max_attempts = 3;
    Bytes result;
    std::string failure_cause;
    std::vector<store::FileDescriptor> outputs;       // stage-out descriptors
    std::vector<std::string> missing_outputs;         // declared but never produced
    TimestampMs enqueued_at = 0;
    TimestampMs started_at = 0;
    TimestampMs ended_at = 0;

    nlohmann::json to_json() const;
    static JobDescriptor from_json(const nlohmann::json& doc);
};

// ---------------------------------------------------------------------------
// Executor-side operation registry
// ---------------------------------------------------------------------------

struct OperationContext {
    std::string workspace;
    Bytes parameters;
    std::string node_id;
    std::atomic<bool>* abort_flag = nullptr;

    bool aborted() const { return abort_flag && abort_flag->load(); }
    /// Interruptible sleep; returns false when aborted early.
    bool sleep_unless_aborted(std::int64_t ms) const;
};

using Operation = std::function<Result<Bytes>(OperationContext&)>;

/// Immutable after container startup by convention; executors refuse job
/// payloads naming operations that are not here.
class OperationRegistry {
public:
    static OperationRegistry& instance();
    void add(const std::string& name, Operation operation);
    bool contains(const std::string& name) const;
    Result<Operation> get(const std::string& name) const;
    std::vector<std::string> names() const;

private:
    mutable std::mutex mutex_;
    std::map<std::string, Operation> operations_;
};

/// run_process, copy_file, rename_file, delete_file, sleep_ms, echo, fib,
/// fail. Idempotent.
void register_builtin_operations();

// ---------------------------------------------------------------------------
// Scheduler
// ---------------------------------------------------------------------------

struct ApplicationRecord {
    std::string app_id;
    std::string model = "task";
    std::string display_name;
    std::string owner;
    security::Credentials credentials;
    std::string reservation_id;
    std::string state = "created";  // created | running | stopped | finished
    std::string client_endpoint;    // event subscriber, empty when none

    nlohmann::json to_json() const;
    static ApplicationRecord from_json(const nlohmann::json& doc);
};

/// Per-unit lifecycle event, sequenced per unit for at-least-once delivery.
struct UnitEvent {
    std::string app_id;
    std::string unit_id;
    std::int64_t seq = 0;
    std::string state;
    std::string detail;

    nlohmann::json to_json() const;
    static UnitEvent from_json(const nlohmann::json& doc);
};

struct JobSpec {
    std::string unit_id;  // client-chosen; doubles as the job id
    std::string operation;
    Bytes parameters;
    store::StagingPlan staging;
    int max_attempts = 3;
};

struct NodeView {
    std::string node_id;
    std::string endpoint;
    bool alive = false;
    bool has_executor = false;
    int slots_total = 0;
    double cpu_usage = 0.0;
};

struct DispatchDecision {
    std::string job_id;
    std::string node_id;
    std::string endpoint;
};

/// The master's job table and matchmaking policy, free of I/O so tests can
/// drive it deterministically. Policy: FIFO by enqueue time with lowest-id
/// tie-break, reservation owners first on reserved nodes, least-loaded node
/// when several are free.
class SchedulerCore {
public:
    using OperationExists = std::function<bool(const std::string&)>;

    explicit SchedulerCore(OperationExists op_exists) : op_exists_(std::move(op_exists)) {}

    Result<ApplicationRecord> create_app(ApplicationRecord record);
    void set_client_endpoint(const std::string& app_id, const std::string& endpoint);
    Result<std::vector<std::string>> submit(const std::string& app_id, const std::vector<JobSpec>& specs,
                                            TimestampMs now);
    /// Marks the app stopped and aborts its non-terminal jobs. Returns
    /// (job_id, node_id) pairs that need a remote abort.
    Result<std::vector<std::pair<std::string, std::string>>> stop_app(const std::string& app_id);

    std::vector<DispatchDecision> plan(TimestampMs now, const std::vector<NodeView>& nodes,
                                       const std::map<std::string, std::vector<resv::AllocationEntry>>& windows,
                                       std::int64_t lead_time_s);

    /// Transitions for the dispatch round-trip.
    Status mark_dispatched(const std::string& job_id, const std::string& node_id);
    void revert_dispatch(const std::string& job_id);

    Status apply_started(const std::string& job_id, const std::string& node_id, TimestampMs started_at);
    /// Terminal report. Duplicates (job already terminal) are ignored.
    /// Failed jobs requeue while attempts remain.
    Status apply_terminal(const std::string& job_id, const std::string& node_id, JobState final_state,
                          Bytes result, const std::string& cause, TimestampMs started_at, TimestampMs ended_at,
                          std::vector<store::FileDescriptor> outputs = {},
                          std::vector<std::string> missing_outputs = {});
    /// Admission refusals requeue without consuming an attempt.
    Status apply_refused(const std::string& job_id, const std::string& node_id, const std::string& reason);
    Result<std::pair<std::string, bool>> abort(const std::string& job_id);  // (assigned node, was running)
    /// Requeues everything assigned to a node that died.
    std::vector<std::string> node_lost(const std::string& node_id);

    void set_slots(const std::string& node_id, int slots_total);
    std::optional<int> slots(const std::string& node_id) const;
    int busy_on(const std::string& node_id) const;
    std::vector<std::string> busy_nodes() const;

    const std::map<std::string, JobDescriptor>& jobs() const { return jobs_; }
    std::optional<JobDescriptor> job(const std::string& job_id) const;
    const std::map<std::string, ApplicationRecord>& apps() const { return apps_; }
    std::optional<ApplicationRecord> app(const std::string& app_id) const;
    std::vector<JobDescriptor> app_jobs(const std::string& app_id) const;
    /// All units terminal (or none exist) and the app was submitted to.
    bool app_finished(const std::string& app_id) const;

    std::map<std::string, int> counts_by_state() const;
    std::int64_t submitted_count() const { return submitted_count_; }
    /// queued+staging+running+terminal must equal submitted.
    Status check_conservation() const;
    double throughput_jobs_per_min(TimestampMs now) const;

    /// Events accumulated since the last drain (push delivery).
    std::vector<UnitEvent> drain_events();
    /// Current state of every unit as replayable events (late subscribers).
    std::vector<UnitEvent> snapshot_events(const std::string& app_id) const;

    nlohmann::json snapshot() const;
    /// Rebuilds the table; in-flight jobs are requeued (their nodes may be
    /// gone after a crash).
    void restore(const nlohmann::json& state);

private:
    void emit(const JobDescriptor& job, const std::string& detail = "");
    void transition(JobDescriptor& job, JobState to, const std::string& detail = "");
    bool eligible(const JobDescriptor& job, const NodeView& node,
                  const std::map<std::string, std::vector<resv::AllocationEntry>>& windows, TimestampS now_s,
                  std::int64_t lead_time_s) const;

    OperationExists op_exists_;
    std::map<std::string, ApplicationRecord> apps_;
    std::map<std::string, JobDescriptor> jobs_;
    std::map<std::string, std::set<std::string>> busy_;  // node_id → job ids
    std::map<std::string, int> slots_;
    std::map<std::string, std::int64_t> unit_seq_;
    std::int64_t submitted_count_ = 0;
    std::vector<UnitEvent> pending_events_;
    std::deque<TimestampMs> completions_;
};

/// Central Scheduling Service. Kinds: app.create, app.submit, app.stop,
/// app.query, app.subscribe, exec.report, exec.abort; sched.tick drives
/// dispatch (also run eagerly after submits and reports).
class SchedulerService : public Service {
public:
    void start(ServiceContext& ctx) override;
    Result<Bytes> handle(const Envelope& request) override;
    nlohmann::json snapshot_state() override;
    void restore_state(const nlohmann::json& state) override;

private:
    Result<security::Principal> check_submit_auth(const nlohmann::json& body);
    void run_tick();
    void detect_lost_nodes(const std::vector<NodeView>& nodes);
    std::vector<NodeView> node_views();
    void push_events();
    void record_usage(const JobDescriptor& job);
    void persist_if_durable();

    ServiceContext* ctx_ = nullptr;
    std::unique_ptr<SchedulerCore> core_;
    nlohmann::json pending_restore_;
    std::int64_t lead_time_s_ = 30;
    int dispatch_timeout_ms_ = 3000;
    std::set<std::string> known_nodes_;
};

/// Per-node Execution Service: admission check, workspace staging, operation
/// run, result collection. Kinds: exec.dispatch, exec.abort, exec.slots,
/// exec.status; exec._finished is the internal slot-release message.
class ExecutorService : public Service {
public:
    void start(ServiceContext& ctx) override;
    void stop() override;
    Result<Bytes> handle(const Envelope& request) override;
    bool drained() override;

private:
    struct RunningJob {
        JobDescriptor job;
        Endpoint report_to;
        std::atomic<bool> abort{false};
        std::thread thread;
        TimestampMs started_at = 0;
    };

    void run_job(std::shared_ptr<RunningJob> running);
    void send_report(const Endpoint& to, const nlohmann::json& body);

    ServiceContext* ctx_ = nullptr;
    int slots_total_ = 1;
    int slots_busy_ = 0;  // mailbox-thread owned
    std::string workspace_root_;
    bool keep_workspaces_ = false;
    std::map<std::string, std::shared_ptr<RunningJob>> running_;
    std::mutex running_mutex_;  // guards running_ for drained()
};

}  // namespace deskgrid::exec
