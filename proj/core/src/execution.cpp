#include "deskgrid/execution.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace deskgrid::exec {

namespace fs = std::filesystem;
using nlohmann::json;

const char* job_state_name(JobState state) {
    switch (state) {
        case JobState::Created: return "created";
        case JobState::Queued: return "queued";
        case JobState::Staging: return "staging";
        case JobState::Running: return "running";
        case JobState::Completed: return "completed";
        case JobState::Failed: return "failed";
        case JobState::Aborted: return "aborted";
    }
    return "?";
}

JobState job_state_from_name(const std::string& name) {
    if (name == "queued") return JobState::Queued;
    if (name == "staging") return JobState::Staging;
    if (name == "running") return JobState::Running;
    if (name == "completed") return JobState::Completed;
    if (name == "failed") return JobState::Failed;
    if (name == "aborted") return JobState::Aborted;
    return JobState::Created;
}

bool is_terminal(JobState state) {
    return state == JobState::Completed || state == JobState::Failed || state == JobState::Aborted;
}

bool legal_transition(JobState from, JobState to) {
    switch (from) {
        case JobState::Created: return to == JobState::Queued;
        case JobState::Queued: return to == JobState::Staging || to == JobState::Aborted;
        case JobState::Staging: return to == JobState::Running || to == JobState::Failed ||
                                       to == JobState::Aborted;
        case JobState::Running: return to == JobState::Completed || to == JobState::Failed ||
                                       to == JobState::Aborted;
        case JobState::Failed: return to == JobState::Queued;  // retry while attempts remain
        default: return false;
    }
}

json JobDescriptor::to_json() const {
    return json{{"job_id", job_id},
                {"app_id", app_id},
                {"model", model},
                {"operation", operation},
                {"parameters", base64_encode(parameters)},
                {"staging", staging.to_json()},
                {"state", job_state_name(state)},
                {"assigned_node", assigned_node},
                {"attempts", attempts},
                {"max_attempts", max_attempts},
                {"result", base64_encode(result)},
                {"failure_cause", failure_cause},
                {"outputs", [this] {
                     json list = json::array();
                     for (const auto& fd : outputs) list.push_back(fd.to_json());
                     return list;
                 }()},
                {"missing_outputs", missing_outputs},
                {"enqueued_at", enqueued_at},
                {"started_at", started_at},
                {"ended_at", ended_at}};
}

JobDescriptor JobDescriptor::from_json(const json& doc) {
    JobDescriptor job;
    job.job_id = doc.value("job_id", "");
    job.app_id = doc.value("app_id", "");
    job.model = doc.value("model", "task");
    job.operation = doc.value("operation", "");
    job.parameters = base64_decode(doc.value("parameters", "")).value_or(Bytes{});
    job.staging = store::StagingPlan::from_json(doc.value("staging", json::object()));
    job.state = job_state_from_name(doc.value("state", "created"));
    job.assigned_node = doc.value("assigned_node", "");
    job.attempts = doc.value("attempts", 0);
    job.max_attempts = doc.value("max_attempts", 3);
    job.result = base64_decode(doc.value("result", "")).value_or(Bytes{});
    job.failure_cause = doc.value("failure_cause", "");
    for (const auto& fd : doc.value("outputs", json::array())) {
        job.outputs.push_back(store::FileDescriptor::from_json(fd));
    }
    job.missing_outputs = doc.value("missing_outputs", std::vector<std::string>{});
    job.enqueued_at = doc.value("enqueued_at", std::int64_t{0});
    job.started_at = doc.value("started_at", std::int64_t{0});
    job.ended_at = doc.value("ended_at", std::int64_t{0});
    return job;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

bool OperationContext::sleep_unless_aborted(std::int64_t ms) const {
    TimestampMs deadline = now_ms() + ms;
    while (now_ms() < deadline) {
        if (aborted()) return false;
        deskgrid::sleep_ms(std::min<std::int64_t>(5, std::max<std::int64_t>(1, deadline - now_ms())));
    }
    return !aborted();
}

OperationRegistry& OperationRegistry::instance() {
    static OperationRegistry registry;
    return registry;
}

void OperationRegistry::add(const std::string& name, Operation operation) {
    std::lock_guard<std::mutex> lock(mutex_);
    operations_[name] = std::move(operation);
}

bool OperationRegistry::contains(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    return operations_.count(name) > 0;
}

Result<Operation> OperationRegistry::get(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = operations_.find(name);
    if (it == operations_.end()) {
        return make_error(errc::unknown_operation, "no operation registered as " + name);
    }
    return it->second;
}

std::vector<std::string> OperationRegistry::names() const {
    std::lock_guard<std::mutex> lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, op] : operations_) out.push_back(name);
    return out;
}

namespace {

Result<json> params_json(const OperationContext& ctx) {
    if (ctx.parameters.empty()) return json::object();
    json doc = json::parse(to_string(ctx.parameters), nullptr, false);
    if (doc.is_discarded()) return make_error(errc::invalid_request, "operation parameters are not JSON");
    return doc;
}

/// Workspace-relative path with traversal rejected.
Result<fs::path> workspace_path(const OperationContext& ctx, const std::string& name) {
    if (auto st = store::validate_logical_name(name); !st) return st.error();
    return fs::path(ctx.workspace) / name;
}

Result<Bytes> run_one_process(OperationContext& ctx, const std::string& command,
                              const std::vector<std::string>& args) {
    if (command.empty()) return make_error(errc::invalid_request, "run_process needs a command");

    int out_pipe[2], err_pipe[2];
    if (::pipe(out_pipe) != 0 || ::pipe(err_pipe) != 0) {
        return make_error(errc::operation_error, "pipe() failed");
    }
    pid_t pid = ::fork();
    if (pid < 0) return make_error(errc::operation_error, "fork() failed");
    if (pid == 0) {
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::dup2(err_pipe[1], STDERR_FILENO);
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        ::close(err_pipe[0]);
        ::close(err_pipe[1]);
        if (!ctx.workspace.empty()) {
            if (::chdir(ctx.workspace.c_str()) != 0) _exit(126);
        }
        std::vector<char*> argv;
        argv.push_back(const_cast<char*>(command.c_str()));
        for (auto& arg : args) argv.push_back(const_cast<char*>(arg.c_str()));
        argv.push_back(nullptr);
        ::execvp(command.c_str(), argv.data());
        _exit(127);
    }
    ::close(out_pipe[1]);
    ::close(err_pipe[1]);

    Bytes stdout_bytes;
    std::string stderr_text;
    bool killed = false;
    int open_count = 2;
    pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
    while (open_count > 0) {
        if (ctx.aborted() && !killed) {
            ::kill(pid, SIGKILL);
            killed = true;
        }
        int rc = ::poll(fds, 2, 50);
        if (rc <= 0) continue;
        char buf[4096];
        for (int i = 0; i < 2; ++i) {
            if (!(fds[i].revents & (POLLIN | POLLHUP))) continue;
            ssize_t n = ::read(fds[i].fd, buf, sizeof(buf));
            if (n > 0) {
                if (i == 0) {
                    stdout_bytes.insert(stdout_bytes.end(), buf, buf + n);
                } else {
                    stderr_text.append(buf, static_cast<std::size_t>(n));
                }
            } else if (n == 0) {
                fds[i].events = 0;
                fds[i].fd = -fds[i].fd - 1;  // stop polling this one
                --open_count;
            }
        }
    }
    ::close(out_pipe[0]);
    ::close(err_pipe[0]);
    int status = 0;
    ::waitpid(pid, &status, 0);
    if (killed) return make_error(errc::aborted, "process killed by abort");
    if (WIFEXITED(status) && WEXITSTATUS(status) != 0) {
        return make_error(errc::operation_error, "exit code " + std::to_string(WEXITSTATUS(status)) +
                                                     (stderr_text.empty() ? "" : ": " + stderr_text));
    }
    if (WIFSIGNALED(status)) {
        return make_error(errc::operation_error, "terminated by signal " + std::to_string(WTERMSIG(status)));
    }
    return stdout_bytes;
}

Result<Bytes> op_run_process(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    return run_one_process(ctx, params.value().value("command", ""),
                           params.value().value("args", std::vector<std::string>{}));
}

/// Runs a command list in order inside one job; stops at the first failure.
/// Stdout of the commands is concatenated.
Result<Bytes> op_run_sequence(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    Bytes combined;
    for (const auto& entry : params.value().value("commands", json::array())) {
        auto outcome = run_one_process(ctx, entry.value("command", ""),
                                       entry.value("args", std::vector<std::string>{}));
        if (!outcome) return outcome.error();
        combined.insert(combined.end(), outcome.value().begin(), outcome.value().end());
        if (ctx.aborted()) return make_error(errc::aborted, "sequence aborted");
    }
    return combined;
}

Result<Bytes> op_copy_file(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    auto src = workspace_path(ctx, params.value().value("src", ""));
    auto dst = workspace_path(ctx, params.value().value("dst", ""));
    if (!src) return src.error();
    if (!dst) return dst.error();
    std::error_code ec;
    fs::create_directories(dst.value().parent_path(), ec);
    fs::copy_file(src.value(), dst.value(), fs::copy_options::overwrite_existing, ec);
    if (ec) return make_error(errc::operation_error, "copy failed: " + ec.message());
    return Bytes{};
}

Result<Bytes> op_rename_file(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    auto from = workspace_path(ctx, params.value().value("from", ""));
    auto to = workspace_path(ctx, params.value().value("to", ""));
    if (!from) return from.error();
    if (!to) return to.error();
    std::error_code ec;
    fs::create_directories(to.value().parent_path(), ec);
    fs::rename(from.value(), to.value(), ec);
    if (ec) return make_error(errc::operation_error, "rename failed: " + ec.message());
    return Bytes{};
}

Result<Bytes> op_delete_file(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    auto path = workspace_path(ctx, params.value().value("path", ""));
    if (!path) return path.error();
    std::error_code ec;
    fs::remove(path.value(), ec);
    if (ec) return make_error(errc::operation_error, "delete failed: " + ec.message());
    return Bytes{};
}

Result<Bytes> op_sleep_ms(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    std::int64_t ms = params.value().value("ms", std::int64_t{0});
    if (!ctx.sleep_unless_aborted(ms)) return make_error(errc::aborted, "sleep aborted");
    return to_bytes("slept " + std::to_string(ms));
}

Result<Bytes> op_echo(OperationContext& ctx) { return ctx.parameters; }

Result<Bytes> op_fib(OperationContext& ctx) {
    auto params = params_json(ctx);
    if (!params) return params.error();
    int n = params.value().value("n", 0);
    if (n < 0 || n > 92) return make_error(errc::invalid_request, "fib argument out of range");
    std::uint64_t a = 0, b = 1;
    for (int i = 0; i < n; ++i) {
        std::uint64_t next = a + b;
        a = b;
        b = next;
    }
    return to_bytes(std::to_string(a));
}

Result<Bytes> op_fail(OperationContext& ctx) {
    auto params = params_json(ctx);
    std::string message = params ? params.value().value("message", "requested failure") : "requested failure";
    return make_error(errc::operation_error, message);
}

}  // namespace

void register_builtin_operations() {
    static bool done = [] {
        auto& registry = OperationRegistry::instance();
        registry.add("run_process", op_run_process);
        registry.add("run_sequence", op_run_sequence);
        registry.add("copy_file", op_copy_file);
        registry.add("rename_file", op_rename_file);
        registry.add("delete_file", op_delete_file);
        registry.add("sleep_ms", op_sleep_ms);
        registry.add("echo", op_echo);
        registry.add("fib", op_fib);
        registry.add("fail", op_fail);
        return true;
    }();
    (void)done;
}

// ---------------------------------------------------------------------------
// SchedulerCore
// ---------------------------------------------------------------------------

json ApplicationRecord::to_json() const {
    return json{{"app_id", app_id},
                {"model", model},
                {"display_name", display_name},
                {"owner", owner},
                {"credentials", {{"user_id", credentials.user_id}, {"token", credentials.token}}},
                {"reservation_id", reservation_id},
                {"state", state},
                {"client_endpoint", client_endpoint}};
}

ApplicationRecord ApplicationRecord::from_json(const json& doc) {
    ApplicationRecord record;
    record.app_id = doc.value("app_id", "");
    record.model = doc.value("model", "task");
    record.display_name = doc.value("display_name", "");
    record.owner = doc.value("owner", "");
    auto creds = doc.value("credentials", json::object());
    record.credentials = {creds.value("user_id", ""), creds.value("token", "")};
    record.reservation_id = doc.value("reservation_id", "");
    record.state = doc.value("state", "created");
    record.client_endpoint = doc.value("client_endpoint", "");
    return record;
}

json UnitEvent::to_json() const {
    return json{{"app_id", app_id}, {"unit_id", unit_id}, {"seq", seq}, {"state", state}, {"detail", detail}};
}

UnitEvent UnitEvent::from_json(const json& doc) {
    UnitEvent event;
    event.app_id = doc.value("app_id", "");
    event.unit_id = doc.value("unit_id", "");
    event.seq = doc.value("seq", std::int64_t{0});
    event.state = doc.value("state", "");
    event.detail = doc.value("detail", "");
    return event;
}

Result<ApplicationRecord> SchedulerCore::create_app(ApplicationRecord record) {
    if (record.app_id.empty()) record.app_id = new_uuid();
    if (record.model != "task" && record.model != "thread" && record.model != "mapreduce") {
        return make_error(errc::unknown_model, "unknown programming model: " + record.model);
    }
    record.state = "created";
    apps_[record.app_id] = record;
    return record;
}

void SchedulerCore::set_client_endpoint(const std::string& app_id, const std::string& endpoint) {
    auto it = apps_.find(app_id);
    if (it != apps_.end()) it->second.client_endpoint = endpoint;
}

Result<std::vector<std::string>> SchedulerCore::submit(const std::string& app_id,
                                                       const std::vector<JobSpec>& specs, TimestampMs now) {
    auto app = apps_.find(app_id);
    if (app == apps_.end()) return make_error(errc::unknown_application, "no application " + app_id);
    if (app->second.state == "stopped") {
        return make_error(errc::unknown_application, "application " + app_id + " is stopped");
    }
    // All-or-nothing: validate the whole batch before queueing anything.
    for (const auto& spec : specs) {
        if (op_exists_ && !op_exists_(spec.operation)) {
            return make_error(errc::unknown_operation, spec.operation);
        }
        if (auto st = spec.staging.validate(); !st) return st.error();
    }
    std::vector<std::string> ids;
    for (const auto& spec : specs) {
        std::string id = spec.unit_id.empty() ? new_uuid() : spec.unit_id;
        ids.push_back(id);
        if (jobs_.count(id)) continue;  // duplicate submit of the same unit is idempotent
        JobDescriptor job;
        job.job_id = id;
        job.app_id = app_id;
        job.model = app->second.model;
        job.operation = spec.operation;
        job.parameters = spec.parameters;
        job.staging = spec.staging;
        job.max_attempts = spec.max_attempts;
        job.state = JobState::Created;
        job.enqueued_at = now;
        jobs_[id] = std::move(job);
        ++submitted_count_;
        transition(jobs_[id], JobState::Queued);
    }
    app->second.state = "running";
    return ids;
}

Result<std::vector<std::pair<std::string, std::string>>> SchedulerCore::stop_app(const std::string& app_id) {
    auto app = apps_.find(app_id);
    if (app == apps_.end()) return make_error(errc::unknown_application, "no application " + app_id);
    std::vector<std::pair<std::string, std::string>> remote_aborts;
    for (auto& [id, job] : jobs_) {
        if (job.app_id != app_id || is_terminal(job.state)) continue;
        if (!job.assigned_node.empty()) {
            remote_aborts.emplace_back(id, job.assigned_node);
            busy_[job.assigned_node].erase(id);
        }
        transition(job, JobState::Aborted, "application stopped");
        job.ended_at = now_ms();
    }
    app->second.state = "stopped";
    return remote_aborts;
}

bool SchedulerCore::eligible(const JobDescriptor& job, const NodeView& node,
                             const std::map<std::string, std::vector<resv::AllocationEntry>>& windows,
                             TimestampS now_s, std::int64_t lead_time_s) const {
    auto it = windows.find(node.node_id);
    if (it == windows.end()) return true;
    for (const auto& entry : it->second) {
        if (entry.window.contains(now_s)) {
            return !entry.bound_app.empty() && entry.bound_app == job.app_id;
        }
        // Hold the node for the owner shortly before the window opens, so a
        // long non-owner job cannot straddle the boundary.
        if (entry.window.start > now_s && entry.window.start - now_s <= lead_time_s &&
            entry.bound_app != job.app_id) {
            return false;
        }
    }
    return true;
}

std::vector<DispatchDecision> SchedulerCore::plan(
    TimestampMs now, const std::vector<NodeView>& nodes,
    const std::map<std::string, std::vector<resv::AllocationEntry>>& windows, std::int64_t lead_time_s) {
    TimestampS now_s = now / 1000;

    struct Slot {
        const NodeView* node;
        int busy;
    };
    std::vector<Slot> slots;
    for (const auto& node : nodes) {
        if (!node.alive || !node.has_executor) continue;
        auto total = slots_.find(node.node_id);
        if (total == slots_.end() || total->second <= 0) continue;
        int busy = busy_on(node.node_id);
        if (busy < total->second) slots.push_back({&node, busy});
    }

    // FIFO by enqueue time, lowest job id between equals.
    std::vector<JobDescriptor*> queue;
    for (auto& [id, job] : jobs_) {
        if (job.state == JobState::Queued) queue.push_back(&job);
    }
    std::sort(queue.begin(), queue.end(), [](const JobDescriptor* a, const JobDescriptor* b) {
        if (a->enqueued_at != b->enqueued_at) return a->enqueued_at < b->enqueued_at;
        return a->job_id < b->job_id;
    });

    std::vector<DispatchDecision> decisions;
    std::set<std::string> decided;
    bool progress = true;
    while (progress) {
        progress = false;
        // Least-loaded node first: fewest busy slots, then lowest observed
        // cpu, then node id for determinism.
        std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) {
            if (a.busy != b.busy) return a.busy < b.busy;
            if (a.node->cpu_usage != b.node->cpu_usage) return a.node->cpu_usage < b.node->cpu_usage;
            return a.node->node_id < b.node->node_id;
        });
        for (auto& slot : slots) {
            int total = slots_[slot.node->node_id];
            if (slot.busy >= total) continue;
            for (JobDescriptor* job : queue) {
                if (decided.count(job->job_id)) continue;
                if (!eligible(*job, *slot.node, windows, now_s, lead_time_s)) continue;
                decisions.push_back({job->job_id, slot.node->node_id, slot.node->endpoint});
                decided.insert(job->job_id);
                ++slot.busy;
                progress = true;
                break;
            }
            if (progress) break;
        }
    }
    return decisions;
}

Status SchedulerCore::mark_dispatched(const std::string& job_id, const std::string& node_id) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return make_error(errc::unknown_job, job_id);
    if (it->second.state != JobState::Queued) {
        return make_error(errc::illegal_transition, "job is not queued");
    }
    it->second.assigned_node = node_id;
    it->second.attempts += 1;
    busy_[node_id].insert(job_id);
    transition(it->second, JobState::Staging);
    return Status::success();
}

void SchedulerCore::revert_dispatch(const std::string& job_id) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end() || it->second.state != JobState::Staging) return;
    busy_[it->second.assigned_node].erase(job_id);
    it->second.assigned_node.clear();
    it->second.attempts -= 1;
    // The dispatch call never reached an executor; rolling back to queued is
    // invisible to clients (staging emits no event).
    it->second.state = JobState::Queued;
}

Status SchedulerCore::apply_started(const std::string& job_id, const std::string& node_id,
                                    TimestampMs started_at) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return make_error(errc::unknown_job, job_id);
    JobDescriptor& job = it->second;
    if (is_terminal(job.state) || job.state == JobState::Running) return Status::success();
    if (job.state != JobState::Staging) return Status::success();  // stale report
    if (job.assigned_node != node_id) return Status::success();
    job.started_at = started_at;
    transition(job, JobState::Running);
    return Status::success();
}

Status SchedulerCore::apply_terminal(const std::string& job_id, const std::string& node_id,
                                     JobState final_state, Bytes result, const std::string& cause,
                                     TimestampMs started_at, TimestampMs ended_at,
                                     std::vector<store::FileDescriptor> outputs,
                                     std::vector<std::string> missing_outputs) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return make_error(errc::unknown_job, job_id);
    JobDescriptor& job = it->second;
    if (!node_id.empty()) busy_[node_id].erase(job_id);
    if (is_terminal(job.state)) return Status::success();  // duplicate terminal report

    if (started_at > 0) job.started_at = started_at;
    job.ended_at = ended_at > 0 ? ended_at : now_ms();

    if (final_state == JobState::Completed) {
        job.result = std::move(result);
        job.failure_cause.clear();
        job.outputs = std::move(outputs);
        job.missing_outputs = std::move(missing_outputs);
        if (job.state == JobState::Staging) transition(job, JobState::Running, "late start report");
        if (job.state == JobState::Queued) {
            // Report from an attempt we had already requeued; accept it as
            // the single terminal outcome.
            job.state = JobState::Running;
            emit(job);
        }
        transition(job, JobState::Completed);
        completions_.push_back(job.ended_at);
        while (completions_.size() > 10000) completions_.pop_front();
        return Status::success();
    }

    // Failure path, possibly with retries left.
    job.failure_cause = cause;
    if (job.state == JobState::Queued) return Status::success();  // stale failure for a requeued job
    if (job.state == JobState::Running || job.state == JobState::Staging) {
        transition(job, JobState::Failed, cause);
    }
    if (job.attempts < job.max_attempts) {
        job.assigned_node.clear();
        job.enqueued_at = now_ms();
        transition(job, JobState::Queued, "retry " + std::to_string(job.attempts + 1));
    }
    return Status::success();
}

Status SchedulerCore::apply_refused(const std::string& job_id, const std::string& node_id,
                                    const std::string& reason) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return make_error(errc::unknown_job, job_id);
    JobDescriptor& job = it->second;
    busy_[node_id].erase(job_id);
    if (job.state != JobState::Staging) return Status::success();
    job.assigned_node.clear();
    job.attempts -= 1;  // a refusal is not an execution attempt
    job.state = JobState::Queued;
    DG_LOG_DEBUG("scheduler", "job " + job_id + " refused by " + node_id + ": " + reason);
    return Status::success();
}

Result<std::pair<std::string, bool>> SchedulerCore::abort(const std::string& job_id) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return make_error(errc::unknown_job, job_id);
    JobDescriptor& job = it->second;
    if (is_terminal(job.state)) {
        return make_error(errc::illegal_transition,
                          std::string("job already ") + job_state_name(job.state));
    }
    std::string node = job.assigned_node;
    bool was_running = job.state == JobState::Running || job.state == JobState::Staging;
    if (!node.empty()) busy_[node].erase(job_id);
    job.ended_at = now_ms();
    transition(job, JobState::Aborted);
    return std::make_pair(node, was_running);
}

std::vector<std::string> SchedulerCore::node_lost(const std::string& node_id) {
    std::vector<std::string> affected;
    auto it = busy_.find(node_id);
    if (it == busy_.end()) return affected;
    std::set<std::string> job_ids = it->second;  // copy; apply_terminal mutates busy_
    for (const auto& job_id : job_ids) {
        auto job = jobs_.find(job_id);
        if (job == jobs_.end() || is_terminal(job->second.state)) continue;
        affected.push_back(job_id);
        (void)apply_terminal(job_id, node_id, JobState::Failed, {}, errc::node_lost, job->second.started_at,
                             now_ms());
    }
    busy_.erase(node_id);
    return affected;
}

void SchedulerCore::set_slots(const std::string& node_id, int slots_total) {
    slots_[node_id] = slots_total;
}

std::optional<int> SchedulerCore::slots(const std::string& node_id) const {
    auto it = slots_.find(node_id);
    if (it == slots_.end()) return std::nullopt;
    return it->second;
}

int SchedulerCore::busy_on(const std::string& node_id) const {
    auto it = busy_.find(node_id);
    return it == busy_.end() ? 0 : static_cast<int>(it->second.size());
}

std::vector<std::string> SchedulerCore::busy_nodes() const {
    std::vector<std::string> out;
    for (const auto& [node, jobs] : busy_) {
        if (!jobs.empty()) out.push_back(node);
    }
    return out;
}

std::optional<JobDescriptor> SchedulerCore::job(const std::string& job_id) const {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second;
}

std::optional<ApplicationRecord> SchedulerCore::app(const std::string& app_id) const {
    auto it = apps_.find(app_id);
    if (it == apps_.end()) return std::nullopt;
    return it->second;
}

std::vector<JobDescriptor> SchedulerCore::app_jobs(const std::string& app_id) const {
    std::vector<JobDescriptor> out;
    for (const auto& [id, job] : jobs_) {
        if (job.app_id == app_id) out.push_back(job);
    }
    return out;
}

bool SchedulerCore::app_finished(const std::string& app_id) const {
    bool any = false;
    for (const auto& [id, job] : jobs_) {
        if (job.app_id != app_id) continue;
        any = true;
        if (!is_terminal(job.state)) return false;
    }
    return any;
}

std::map<std::string, int> SchedulerCore::counts_by_state() const {
    std::map<std::string, int> counts;
    for (const auto& [id, job] : jobs_) counts[job_state_name(job.state)] += 1;
    return counts;
}

Status SchedulerCore::check_conservation() const {
    std::int64_t sum = 0;
    for (const auto& [id, job] : jobs_) {
        if (job.state != JobState::Created) ++sum;
    }
    if (sum != submitted_count_) {
        return make_error(errc::store_corrupt, "job conservation violated: " + std::to_string(sum) + " vs " +
                                                   std::to_string(submitted_count_));
    }
    return Status::success();
}

double SchedulerCore::throughput_jobs_per_min(TimestampMs now) const {
    TimestampMs horizon = now - 5 * 60 * 1000;
    int count = 0;
    for (auto it = completions_.rbegin(); it != completions_.rend() && *it >= horizon; ++it) ++count;
    return count / 5.0;
}

void SchedulerCore::emit(const JobDescriptor& job, const std::string& detail) {
    UnitEvent event;
    event.app_id = job.app_id;
    event.unit_id = job.job_id;
    event.seq = ++unit_seq_[job.job_id];
    event.state = job_state_name(job.state);
    event.detail = detail.empty() ? job.failure_cause : detail;
    pending_events_.push_back(std::move(event));
}

void SchedulerCore::transition(JobDescriptor& job, JobState to, const std::string& detail) {
    if (!legal_transition(job.state, to)) {
        DG_LOG_WARN("scheduler", "suppressed illegal transition " + std::string(job_state_name(job.state)) +
                                     " -> " + job_state_name(to) + " for job " + job.job_id);
        return;
    }
    job.state = to;
    // Clients see queued / running / terminal; staging stays internal.
    if (to != JobState::Staging) emit(job, detail);
}

std::vector<UnitEvent> SchedulerCore::drain_events() {
    std::vector<UnitEvent> out;
    out.swap(pending_events_);
    return out;
}

std::vector<UnitEvent> SchedulerCore::snapshot_events(const std::string& app_id) const {
    std::vector<UnitEvent> out;
    for (const auto& [id, job] : jobs_) {
        if (job.app_id != app_id || job.state == JobState::Created) continue;
        UnitEvent event;
        event.app_id = app_id;
        event.unit_id = id;
        auto seq = unit_seq_.find(id);
        event.seq = seq == unit_seq_.end() ? 1 : seq->second;
        event.state = job_state_name(job.state);
        event.detail = job.failure_cause;
        out.push_back(std::move(event));
    }
    return out;
}

json SchedulerCore::snapshot() const {
    json apps = json::array();
    for (const auto& [id, app] : apps_) apps.push_back(app.to_json());
    json jobs = json::array();
    for (const auto& [id, job] : jobs_) jobs.push_back(job.to_json());
    json seq = json::object();
    for (const auto& [id, n] : unit_seq_) seq[id] = n;
    return json{{"applications", apps}, {"jobs", jobs}, {"unit_seq", seq}, {"submitted", submitted_count_}};
}

void SchedulerCore::restore(const json& state) {
    apps_.clear();
    jobs_.clear();
    busy_.clear();
    unit_seq_.clear();
    pending_events_.clear();
    submitted_count_ = state.value("submitted", std::int64_t{0});
    for (const auto& doc : state.value("applications", json::array())) {
        ApplicationRecord app = ApplicationRecord::from_json(doc);
        apps_[app.app_id] = std::move(app);
    }
    for (const auto& [id, n] : state.value("unit_seq", json::object()).items()) {
        unit_seq_[id] = n.get<std::int64_t>();
    }
    for (const auto& doc : state.value("jobs", json::array())) {
        JobDescriptor job = JobDescriptor::from_json(doc);
        // Work that was in flight when the snapshot was cut has lost its
        // executor; run it again.
        if (job.state == JobState::Staging || job.state == JobState::Running) {
            job.state = JobState::Queued;
            job.assigned_node.clear();
            emit(job, "requeued after restart");
        }
        jobs_[job.job_id] = std::move(job);
    }
}

// ---------------------------------------------------------------------------
// SchedulerService
// ---------------------------------------------------------------------------

void SchedulerService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    register_builtin_operations();
    core_ = std::make_unique<SchedulerCore>(
        [](const std::string& name) { return OperationRegistry::instance().contains(name); });
    if (!pending_restore_.is_null()) {
        core_->restore(pending_restore_);
        pending_restore_ = nullptr;
    }
    lead_time_s_ = ctx.opt_int("lead_time_s", 30);
    dispatch_timeout_ms_ = static_cast<int>(ctx.opt_int("dispatch_timeout_ms", 3000));
    ctx.schedule_periodic("sched.tick", static_cast<int>(ctx.opt_int("tick_period_ms", 200)));
}

Result<security::Principal> SchedulerService::check_submit_auth(const json& body) {
    security::Credentials creds{body.value("credentials", json::object()).value("user_id", ""),
                                body.value("credentials", json::object()).value("token", "")};
    auto principal = ctx_->security().authenticate(creds);
    if (!principal) return make_error(errc::unauthenticated, "authentication failed");
    if (!ctx_->security().authorize(principal.value(), security::Action::Submit)) {
        return make_error(errc::denied, "denied");
    }
    return principal;
}

std::vector<NodeView> SchedulerService::node_views() {
    std::vector<NodeView> views;
    auto reply = ctx_->call_local("directory", "dir.query", to_bytes(json{{"service", ""}}.dump()), 2000);
    if (!reply) return views;
    json doc = json::parse(to_string(reply.value()), nullptr, false);
    if (doc.is_discarded()) return views;
    for (const auto& record : doc.value("records", json::array())) {
        NodeView view;
        view.node_id = record.value("node_id", "");
        view.endpoint = record.value("endpoint", "");
        view.alive = record.value("state", "") == "alive";
        auto services = record.value("services", std::vector<std::string>{});
        view.has_executor = std::find(services.begin(), services.end(), "executor") != services.end();
        view.cpu_usage = record.value("last_stats", json::object()).value("cpu_usage_percent", 0.0);
        views.push_back(std::move(view));

        const NodeView& v = views.back();
        if (v.alive && v.has_executor && !known_nodes_.count(v.node_id)) {
            auto ep = parse_endpoint(v.endpoint);
            if (!ep) continue;
            auto slots_reply = ctx_->call(ep.value(), "executor", "exec.slots", {}, 2000);
            if (slots_reply) {
                json slots_doc = json::parse(to_string(slots_reply.value()), nullptr, false);
                if (!slots_doc.is_discarded()) {
                    core_->set_slots(v.node_id, slots_doc.value("slots_total", 1));
                    known_nodes_.insert(v.node_id);
                }
            }
        }
    }
    return views;
}

void SchedulerService::detect_lost_nodes(const std::vector<NodeView>& nodes) {
    std::set<std::string> alive;
    for (const auto& node : nodes) {
        if (node.alive) alive.insert(node.node_id);
    }
    for (const auto& node_id : core_->busy_nodes()) {
        if (alive.count(node_id)) continue;
        auto affected = core_->node_lost(node_id);
        if (!affected.empty()) {
            DG_LOG_WARN("scheduler", "node " + node_id + " lost with " + std::to_string(affected.size()) +
                                         " jobs; requeued where attempts remain");
            known_nodes_.erase(node_id);
            persist_if_durable();
        }
    }
}

void SchedulerService::run_tick() {
    auto views = node_views();
    detect_lost_nodes(views);

    std::map<std::string, std::vector<resv::AllocationEntry>> windows;
    auto map_reply = ctx_->call_local("reservation", "res.mapview", {}, 2000);
    if (map_reply) {
        json doc = json::parse(to_string(map_reply.value()), nullptr, false);
        if (!doc.is_discarded()) {
            for (const auto& [node, entries] : doc.value("allocation", json::object()).items()) {
                std::vector<resv::AllocationEntry> list;
                for (const auto& entry : entries) list.push_back(resv::AllocationEntry::from_json(entry));
                windows[node] = std::move(list);
            }
        }
    }

    auto decisions = core_->plan(now_ms(), views, windows, lead_time_s_);
    for (const auto& decision : decisions) {
        if (auto st = core_->mark_dispatched(decision.job_id, decision.node_id); !st) continue;
        auto job = core_->job(decision.job_id);
        auto app = core_->app(job->app_id);
        auto ep = parse_endpoint(decision.endpoint);
        if (!ep) {
            core_->revert_dispatch(decision.job_id);
            continue;
        }
        json payload = {{"job", job->to_json()},
                        {"credentials",
                         {{"user_id", app ? app->credentials.user_id : ""},
                          {"token", app ? app->credentials.token : ""}}},
                        {"report_to", ctx_->self_endpoint().to_string()}};
        auto reply = ctx_->call(ep.value(), "executor", "exec.dispatch", to_bytes(payload.dump()),
                                dispatch_timeout_ms_);
        if (!reply) {
            core_->revert_dispatch(decision.job_id);
            continue;
        }
        json doc = json::parse(to_string(reply.value()), nullptr, false);
        if (doc.is_discarded() || !doc.value("accepted", false)) {
            (void)core_->apply_refused(decision.job_id, decision.node_id,
                                       doc.is_discarded() ? "bad reply" : doc.value("reason", ""));
        }
    }
    push_events();
}

void SchedulerService::push_events() {
    auto events = core_->drain_events();
    if (events.empty()) return;
    std::map<std::string, json> batches;
    for (const auto& event : events) {
        auto app = core_->app(event.app_id);
        if (!app || app->client_endpoint.empty()) continue;
        auto& batch = batches[app->client_endpoint];
        if (batch.is_null()) batch = json{{"events", json::array()}};
        batch["events"].push_back(event.to_json());
    }
    for (const auto& [endpoint, batch] : batches) {
        auto ep = parse_endpoint(endpoint);
        if (!ep) continue;
        (void)ctx_->post(ep.value(), "_client", "app.event", to_bytes(batch.dump()));
    }
}

void SchedulerService::record_usage(const JobDescriptor& job) {
    if (job.started_at <= 0) return;  // never reached running; nothing consumed
    auto app = core_->app(job.app_id);
    json body = {{"user_id", app ? app->owner : ""},
                 {"app_id", job.app_id},
                 {"job_id", job.job_id},
                 {"node_id", job.assigned_node},
                 {"started_at", job.started_at},
                 {"ended_at", job.ended_at}};
    (void)ctx_->post_local("accounting", "acct.record", to_bytes(body.dump()));
}

void SchedulerService::persist_if_durable() {
    if (ctx_->container().persistence().name() != "durable") return;
    (void)ctx_->persist_with_own_state(core_->snapshot());
}

Result<Bytes> SchedulerService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "sched.tick") {
        run_tick();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "app.create") {
        auto principal = check_submit_auth(body);
        if (!principal) return principal.error();
        ApplicationRecord record;
        record.model = body.value("model", "task");
        record.display_name = body.value("display_name", "");
        record.owner = principal.value().user_id;
        record.credentials = {body.value("credentials", json::object()).value("user_id", ""),
                              body.value("credentials", json::object()).value("token", "")};
        record.reservation_id = body.value("reservation_id", "");
        record.client_endpoint = body.value("client_endpoint", "");
        auto created = core_->create_app(record);
        if (!created) return created.error();
        if (!created.value().reservation_id.empty()) {
            json bind = {{"reservation_id", created.value().reservation_id},
                         {"app_id", created.value().app_id},
                         {"owner", created.value().owner}};
            auto bound = ctx_->call_local("reservation", "res.bind", to_bytes(bind.dump()), 3000);
            if (!bound) return bound.error();
        }
        return to_bytes(json{{"app", created.value().to_json()}}.dump());
    }
    if (request.kind == "app.submit") {
        auto principal = check_submit_auth(body);
        if (!principal) return principal.error();
        std::string app_id = body.value("app_id", "");
        std::vector<JobSpec> specs;
        for (const auto& doc : body.value("jobs", json::array())) {
            JobSpec spec;
            spec.unit_id = doc.value("unit_id", "");
            spec.operation = doc.value("operation", "");
            spec.parameters = base64_decode(doc.value("parameters", "")).value_or(Bytes{});
            spec.staging = store::StagingPlan::from_json(doc.value("staging", json::object()));
            spec.max_attempts = doc.value("max_attempts", 3);
            specs.push_back(std::move(spec));
        }
        auto ids = core_->submit(app_id, specs, now_ms());
        if (!ids) return ids.error();
        persist_if_durable();  // jobs are durable before the ack
        push_events();
        (void)ctx_->post_local("scheduler", "sched.tick", {});
        return to_bytes(json{{"job_ids", ids.value()}}.dump());
    }
    if (request.kind == "app.stop") {
        auto principal = check_submit_auth(body);
        if (!principal) return principal.error();
        auto aborts = core_->stop_app(body.value("app_id", ""));
        if (!aborts) return aborts.error();
        for (const auto& [job_id, node_id] : aborts.value()) {
            auto ep = ctx_->container().peer_endpoint(node_id);
            if (ep) {
                (void)ctx_->post(*ep, "executor", "exec.abort", to_bytes(json{{"job_id", job_id}}.dump()));
            }
        }
        persist_if_durable();
        push_events();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "app.query") {
        auto app = core_->app(body.value("app_id", ""));
        if (!app) return make_error(errc::unknown_application, body.value("app_id", ""));
        json jobs = json::array();
        bool finished = true;
        for (const auto& job : core_->app_jobs(app->app_id)) {
            jobs.push_back(job.to_json());
            if (!is_terminal(job.state)) finished = false;
        }
        json app_doc = app->to_json();
        if (app->state == "running" && finished && !jobs.empty()) app_doc["state"] = "finished";
        return to_bytes(json{{"app", app_doc}, {"jobs", jobs}}.dump());
    }
    if (request.kind == "app.subscribe") {
        auto app = core_->app(body.value("app_id", ""));
        if (!app) return make_error(errc::unknown_application, body.value("app_id", ""));
        core_->set_client_endpoint(app->app_id, body.value("endpoint", ""));
        json events = json::array();
        for (const auto& event : core_->snapshot_events(app->app_id)) events.push_back(event.to_json());
        return to_bytes(json{{"events", events}}.dump());
    }
    if (request.kind == "exec.report") {
        std::string job_id = body.value("job_id", "");
        std::string node_id = body.value("node_id", "");
        std::string phase = body.value("phase", "");
        if (phase == "started") {
            (void)core_->apply_started(job_id, node_id, body.value("started_at", now_ms()));
        } else if (phase == "completed" || phase == "failed") {
            auto before = core_->job(job_id);
            JobState final_state = phase == "completed" ? JobState::Completed : JobState::Failed;
            Bytes result = base64_decode(body.value("result", "")).value_or(Bytes{});
            std::vector<store::FileDescriptor> outputs;
            for (const auto& fd : body.value("outputs", json::array())) {
                outputs.push_back(store::FileDescriptor::from_json(fd));
            }
            auto st = core_->apply_terminal(job_id, node_id, final_state, std::move(result),
                                            body.value("cause", ""), body.value("started_at", std::int64_t{0}),
                                            body.value("ended_at", std::int64_t{0}), std::move(outputs),
                                            body.value("missing_outputs", std::vector<std::string>{}));
            if (!st) return st.error();
            auto after = core_->job(job_id);
            if (before && after && !is_terminal(before->state) && is_terminal(after->state)) {
                record_usage(*after);
                persist_if_durable();
            } else if (after && after->state == JobState::Queued && before &&
                       before->state != JobState::Queued) {
                // Failed attempt that requeued still consumed resources.
                JobDescriptor attempt = *after;
                attempt.assigned_node = node_id;
                attempt.started_at = body.value("started_at", std::int64_t{0});
                attempt.ended_at = body.value("ended_at", std::int64_t{0});
                record_usage(attempt);
            }
        } else {
            return make_error(errc::invalid_request, "unknown report phase: " + phase);
        }
        push_events();
        (void)ctx_->post_local("scheduler", "sched.tick", {});
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "exec.abort") {
        auto result = core_->abort(body.value("job_id", ""));
        if (!result) return result.error();
        auto job = core_->job(body.value("job_id", ""));
        if (job) record_usage(*job);
        const auto& [node, was_running] = result.value();
        if (was_running && !node.empty()) {
            auto ep = ctx_->container().peer_endpoint(node);
            if (ep) {
                (void)ctx_->post(*ep, "executor", "exec.abort",
                                 to_bytes(json{{"job_id", body.value("job_id", "")}}.dump()));
            }
        }
        persist_if_durable();
        push_events();
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "sched.stats") {
        json counts = json::object();
        for (const auto& [state, count] : core_->counts_by_state()) counts[state] = count;
        json nodes = json::object();
        for (const auto& node_id : known_nodes_) {
            nodes[node_id] = {{"busy", core_->busy_on(node_id)}, {"total", core_->slots(node_id).value_or(0)}};
        }
        return to_bytes(json{{"jobs_by_state", counts},
                             {"submitted", core_->submitted_count()},
                             {"throughput_jobs_per_min", core_->throughput_jobs_per_min(now_ms())},
                             {"slots", nodes}}
                            .dump());
    }
    return make_error(errc::invalid_request, "unknown scheduler verb: " + request.kind);
}

json SchedulerService::snapshot_state() { return core_ ? core_->snapshot() : json{}; }

void SchedulerService::restore_state(const json& state) {
    if (core_) {
        core_->restore(state);
    } else {
        pending_restore_ = state;
    }
}

// ---------------------------------------------------------------------------
// ExecutorService
// ---------------------------------------------------------------------------

void ExecutorService::start(ServiceContext& ctx) {
    ctx_ = &ctx;
    register_builtin_operations();
    int slots = static_cast<int>(ctx.opt_int("slots", 0));
    slots_total_ = slots > 0 ? slots : ctx.pal().probe_static().cpu_count;
    workspace_root_ = ctx.opt_str("workspace_root", "");
    if (workspace_root_.empty()) {
        workspace_root_ =
            (fs::temp_directory_path() / ("deskgrid-exec-" + ctx.node_id().substr(0, 8))).string();
    }
    keep_workspaces_ = ctx.opt_int("retain_workspaces", 0) != 0;
    std::error_code ec;
    fs::create_directories(workspace_root_, ec);
}

void ExecutorService::stop() {
    std::vector<std::shared_ptr<RunningJob>> running;
    {
        std::lock_guard<std::mutex> lock(running_mutex_);
        for (auto& [id, job] : running_) running.push_back(job);
        running_.clear();
    }
    for (auto& job : running) job->abort.store(true);
    for (auto& job : running) {
        if (job->thread.joinable()) job->thread.join();
    }
}

bool ExecutorService::drained() {
    std::lock_guard<std::mutex> lock(running_mutex_);
    return running_.empty();
}

void ExecutorService::send_report(const Endpoint& to, const json& body) {
    for (int attempt = 0; attempt < 3; ++attempt) {
        auto reply = ctx_->call(to, "scheduler", "exec.report", to_bytes(body.dump()), 5000);
        if (reply) return;
        DG_LOG_DEBUG("executor", "report delivery failed (try " + std::to_string(attempt + 1) +
                                     "): " + reply.error().to_string());
        deskgrid::sleep_ms(500);
    }
}

void ExecutorService::run_job(std::shared_ptr<RunningJob> running) {
    JobDescriptor& job = running->job;
    running->started_at = now_ms();

    json started = {{"job_id", job.job_id},
                    {"node_id", ctx_->node_id()},
                    {"phase", "started"},
                    {"started_at", running->started_at}};
    send_report(running->report_to, started);

    std::string workspace =
        (fs::path(workspace_root_) / (job.job_id + "-a" + std::to_string(job.attempts))).string();
    std::error_code ec;
    fs::create_directories(workspace, ec);

    json report = {{"job_id", job.job_id}, {"node_id", ctx_->node_id()}, {"started_at", running->started_at}};
    Result<Bytes> outcome = Bytes{};
    store::StageOutReport staged;

    if (auto st = store::stage_in(job.staging, workspace); !st) {
        outcome = st.error();
    } else {
        auto operation = OperationRegistry::instance().get(job.operation);
        if (!operation) {
            outcome = operation.error();
        } else {
            OperationContext op_ctx;
            op_ctx.workspace = workspace;
            op_ctx.parameters = job.parameters;
            op_ctx.node_id = ctx_->node_id();
            op_ctx.abort_flag = &running->abort;
            try {
                outcome = operation.value()(op_ctx);
            } catch (const std::exception& e) {
                outcome = Error{errc::operation_error, e.what()};
            }
            if (outcome.ok()) {
                auto out = store::stage_out(job.staging, workspace);
                if (!out) {
                    outcome = out.error();
                } else {
                    staged = std::move(out.value());
                }
            }
        }
    }

    report["ended_at"] = now_ms();
    if (running->abort.load()) {
        report["phase"] = "failed";
        report["cause"] = errc::aborted;
    } else if (outcome.ok()) {
        report["phase"] = "completed";
        report["result"] = base64_encode(outcome.value());
        json outputs = json::array();
        for (const auto& descriptor : staged.uploaded) outputs.push_back(descriptor.to_json());
        report["outputs"] = outputs;
        report["missing_outputs"] = staged.missing;
    } else {
        report["phase"] = "failed";
        report["cause"] = outcome.error().code == errc::operation_error
                              ? std::string(errc::operation_error) + ": " + outcome.error().message
                              : outcome.error().to_string();
    }

    if (!keep_workspaces_) {
        std::error_code cleanup_ec;
        fs::remove_all(workspace, cleanup_ec);
    }
    send_report(running->report_to, report);
    (void)ctx_->post_local("executor", "exec._finished", to_bytes(json{{"job_id", job.job_id}}.dump()));
}

Result<Bytes> ExecutorService::handle(const Envelope& request) {
    json body = request.payload.empty() ? json::object() : json::parse(to_string(request.payload), nullptr, false);
    if (body.is_discarded()) return make_error(errc::invalid_request, "payload is not JSON");

    if (request.kind == "exec.slots") {
        return to_bytes(json{{"slots_total", slots_total_}}.dump());
    }
    if (request.kind == "exec.status") {
        json ids = json::array();
        {
            std::lock_guard<std::mutex> lock(running_mutex_);
            for (const auto& [id, job] : running_) ids.push_back(id);
        }
        return to_bytes(
            json{{"slots_total", slots_total_}, {"slots_busy", slots_busy_}, {"running", ids}}.dump());
    }
    if (request.kind == "exec.dispatch") {
        if (slots_busy_ >= slots_total_) {
            return to_bytes(json{{"accepted", false}, {"reason", "slots"}}.dump());
        }
        JobDescriptor job = JobDescriptor::from_json(body.value("job", json::object()));
        auto report_to = parse_endpoint(body.value("report_to", ""));
        if (!report_to) return make_error(errc::invalid_request, "dispatch without report_to");

        security::Credentials creds{body.value("credentials", json::object()).value("user_id", ""),
                                    body.value("credentials", json::object()).value("token", "")};
        bool security_ok = ctx_->security().authenticate(creds).ok();

        // The Allocation Manager gates admission; without one the node is
        // unreserved and the security check decides.
        resv::AdmissionDecision decision{security_ok, security_ok ? "" : "security"};
        auto check = ctx_->call_local(
            "allocation", "alloc.check",
            to_bytes(json{{"app_id", job.app_id}, {"security_ok", security_ok}}.dump()), 2000);
        if (check) {
            json doc = json::parse(to_string(check.value()), nullptr, false);
            if (!doc.is_discarded()) {
                decision.admit = doc.value("admit", false);
                decision.reason = doc.value("reason", "");
            }
        } else if (check.error().code != errc::unknown_service) {
            return to_bytes(json{{"accepted", false}, {"reason", "admission check unavailable"}}.dump());
        }
        if (!decision.admit) {
            return to_bytes(json{{"accepted", false}, {"reason", decision.reason}}.dump());
        }

        auto running = std::make_shared<RunningJob>();
        running->job = std::move(job);
        running->report_to = report_to.value();
        {
            std::lock_guard<std::mutex> lock(running_mutex_);
            running_[running->job.job_id] = running;
        }
        ++slots_busy_;
        running->thread = std::thread([this, running] { run_job(running); });
        return to_bytes(json{{"accepted", true}}.dump());
    }
    if (request.kind == "exec.abort") {
        std::lock_guard<std::mutex> lock(running_mutex_);
        auto it = running_.find(body.value("job_id", ""));
        if (it != running_.end()) it->second->abort.store(true);
        return to_bytes(json{{"ok", true}}.dump());
    }
    if (request.kind == "exec._finished") {
        std::shared_ptr<RunningJob> finished;
        {
            std::lock_guard<std::mutex> lock(running_mutex_);
            auto it = running_.find(body.value("job_id", ""));
            if (it != running_.end()) {
                finished = it->second;
                running_.erase(it);
            }
        }
        if (finished) {
            if (finished->thread.joinable()) finished->thread.join();
            --slots_busy_;
        }
        return to_bytes(json{{"ok", true}}.dump());
    }
    return make_error(errc::invalid_request, "unknown executor verb: " + request.kind);
}

}  // namespace deskgrid::exec
