#pragma once

#include "deskgrid/appmodel.hpp"
#include "deskgrid/models.hpp"

#include <nlohmann/json.hpp>

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace deskgrid::sweep {

/// One parameter and the values it sweeps over. A range yields exactly
/// `count` values: start, start+step, ...; numbers are rendered with the
/// shortest round-trip decimal form.
struct ParameterDomain {
    enum class Kind { Range, Enumeration };
    std::string name;
    Kind kind = Kind::Enumeration;
    double start = 0.0;
    double step = 1.0;
    int count = 0;
    std::vector<std::string> values;  // enumeration

    Result<std::vector<std::string>> expand_values() const;

    nlohmann::json to_json() const;
    static ParameterDomain from_json(const nlohmann::json& doc);
};

ParameterDomain range_domain(const std::string& name, double start, double step, int count);
ParameterDomain enum_domain(const std::string& name, std::vector<std::string> values);

struct TemplateCommand {
    std::string command;
    std::vector<std::string> args;

    nlohmann::json to_json() const;
    static TemplateCommand from_json(const nlohmann::json& doc);
};

/// The reusable task shape: a command sequence plus input/output file specs,
/// all of which may contain ${name} placeholders over the declared domains.
struct TaskTemplate {
    std::string executable;  // informational default for the wizard
    std::vector<ParameterDomain> domains;
    std::vector<std::string> input_specs;
    std::vector<std::string> output_specs;
    std::vector<TemplateCommand> commands;

    /// UndeclaredPlaceholder / EmptyDomain surface here; unused domains only
    /// earn a warning line.
    Status validate(std::vector<std::string>* warnings = nullptr) const;

    nlohmann::json to_json() const;
    static TaskTemplate from_json(const nlohmann::json& doc);
    static Result<TaskTemplate> load_file(const std::string& path);
    Status save_file(const std::string& path) const;
};

/// One point of the cartesian product.
struct Combination {
    std::map<std::string, std::string> values;         // parameter → value
    std::vector<std::string> value_tuple;              // in domain declaration order
    std::vector<TemplateCommand> commands;             // placeholders substituted
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
};

/// Expands every combination of parameter values, odometer order over the
/// domains in declaration order (last domain fastest). Pure: same template,
/// same output.
Result<std::vector<Combination>> expand(const TaskTemplate& task_template);

/// Substitutes ${name} occurrences; unknown names are left untouched (the
/// validator rejects them beforehand).
std::string substitute(const std::string& text, const std::map<std::string, std::string>& values);

struct SweepEntry {
    std::vector<std::string> value_tuple;
    std::string unit_id;
    exec::JobState state = exec::JobState::Created;
    std::string failure_cause;
};

struct SweepReport {
    std::int64_t total = 0;
    std::map<std::string, int> counts_by_state;
    std::vector<SweepEntry> entries;
};

/// Expands the template and runs each combination as one task (the command
/// sequence runs inside a single job, in order). Staging specs ride the
/// given channel when one is provided.
Result<SweepReport> run_sweep(app::Application& app, const TaskTemplate& task_template,
                              const store::DataChannelSpec& channel = {}, int timeout_ms = -1);

/// Interactive template builder: executable, parameter domains, input files,
/// output files, command sequence. Validation failures re-prompt. Writes
/// nothing; the caller saves the returned template.
Result<TaskTemplate> wizard(std::istream& in, std::ostream& out);

}  // namespace deskgrid::sweep
