#include "deskgrid/sweep.hpp"

#include <charconv>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace deskgrid::sweep {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

/// Shortest decimal form that round-trips to the same double.
std::string format_number(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    (void)ec;
    return std::string(buf, ptr);
}

/// Every ${name} occurrence in `text`.
std::vector<std::string> placeholders(const std::string& text) {
    std::vector<std::string> names;
    std::size_t pos = 0;
    while ((pos = text.find("${", pos)) != std::string::npos) {
        auto end = text.find('}', pos + 2);
        if (end == std::string::npos) break;
        names.push_back(text.substr(pos + 2, end - pos - 2));
        pos = end + 1;
    }
    return names;
}

}  // namespace

Result<std::vector<std::string>> ParameterDomain::expand_values() const {
    if (kind == Kind::Enumeration) {
        if (values.empty()) return make_error(errc::empty_domain, "enumeration " + name + " is empty");
        return values;
    }
    if (count < 1) return make_error(errc::empty_domain, "range " + name + " has no values");
    if (step == 0.0) return make_error(errc::invalid_request, "range " + name + " has step 0");
    std::vector<std::string> out;
    for (int i = 0; i < count; ++i) out.push_back(format_number(start + step * i));
    return out;
}

ParameterDomain range_domain(const std::string& name, double start, double step, int count) {
    ParameterDomain d;
    d.name = name;
    d.kind = ParameterDomain::Kind::Range;
    d.start = start;
    d.step = step;
    d.count = count;
    return d;
}

ParameterDomain enum_domain(const std::string& name, std::vector<std::string> values) {
    ParameterDomain d;
    d.name = name;
    d.kind = ParameterDomain::Kind::Enumeration;
    d.values = std::move(values);
    return d;
}

json ParameterDomain::to_json() const {
    if (kind == Kind::Range) {
        return json{{"name", name}, {"kind", "range"}, {"start", start}, {"step", step}, {"count", count}};
    }
    return json{{"name", name}, {"kind", "enum"}, {"values", values}};
}

ParameterDomain ParameterDomain::from_json(const json& doc) {
    ParameterDomain d;
    d.name = doc.value("name", "");
    if (doc.value("kind", "enum") == "range") {
        d.kind = Kind::Range;
        d.start = doc.value("start", 0.0);
        d.step = doc.value("step", 1.0);
        d.count = doc.value("count", 0);
    } else {
        d.kind = Kind::Enumeration;
        d.values = doc.value("values", std::vector<std::string>{});
    }
    return d;
}

json TemplateCommand::to_json() const { return json{{"command", command}, {"args", args}}; }

TemplateCommand TemplateCommand::from_json(const json& doc) {
    return TemplateCommand{doc.value("command", ""), doc.value("args", std::vector<std::string>{})};
}

Status TaskTemplate::validate(std::vector<std::string>* warnings) const {
    std::set<std::string> declared;
    for (const auto& domain : domains) {
        if (domain.name.empty()) return make_error(errc::invalid_request, "domain with empty name");
        if (!declared.insert(domain.name).second) {
            return make_error(errc::invalid_request, "duplicate domain name: " + domain.name);
        }
        auto values = domain.expand_values();
        if (!values) return values.error();
    }
    std::set<std::string> referenced;
    auto check_text = [&](const std::string& text) -> Status {
        for (const auto& name : placeholders(text)) {
            if (!declared.count(name)) {
                return make_error(errc::undeclared_placeholder, name);
            }
            referenced.insert(name);
        }
        return Status::success();
    };
    for (const auto& command : commands) {
        if (auto st = check_text(command.command); !st) return st;
        for (const auto& arg : command.args) {
            if (auto st = check_text(arg); !st) return st;
        }
    }
    for (const auto* list : {&input_specs, &output_specs}) {
        for (const auto& spec : *list) {
            if (auto st = check_text(spec); !st) return st;
        }
    }
    if (warnings) {
        for (const auto& name : declared) {
            if (!referenced.count(name)) warnings->push_back("domain " + name + " is never referenced");
        }
    }
    return Status::success();
}

json TaskTemplate::to_json() const {
    // Stable field order so saved templates round-trip byte-for-byte.
    ordered_json doc;
    doc["executable"] = executable;
    ordered_json domain_docs = ordered_json::array();
    for (const auto& domain : domains) domain_docs.push_back(ordered_json(domain.to_json()));
    doc["domains"] = domain_docs;
    doc["inputs"] = input_specs;
    doc["outputs"] = output_specs;
    ordered_json command_docs = ordered_json::array();
    for (const auto& command : commands) command_docs.push_back(ordered_json(command.to_json()));
    doc["commands"] = command_docs;
    return doc;
}

TaskTemplate TaskTemplate::from_json(const json& doc) {
    TaskTemplate t;
    t.executable = doc.value("executable", "");
    for (const auto& d : doc.value("domains", json::array())) t.domains.push_back(ParameterDomain::from_json(d));
    t.input_specs = doc.value("inputs", std::vector<std::string>{});
    t.output_specs = doc.value("outputs", std::vector<std::string>{});
    for (const auto& c : doc.value("commands", json::array())) t.commands.push_back(TemplateCommand::from_json(c));
    return t;
}

Result<TaskTemplate> TaskTemplate::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) return make_error(errc::not_found, "cannot open template: " + path);
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) return make_error(errc::invalid_request, "template is not valid JSON: " + path);
    return from_json(doc);
}

Status TaskTemplate::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) return make_error(errc::invalid_request, "cannot write template: " + path);
    out << to_json().dump(2) << "\n";
    return Status::success();
}

std::string substitute(const std::string& text, const std::map<std::string, std::string>& values) {
    std::string out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto open = text.find("${", pos);
        if (open == std::string::npos) {
            out.append(text, pos, std::string::npos);
            break;
        }
        auto close = text.find('}', open + 2);
        if (close == std::string::npos) {
            out.append(text, pos, std::string::npos);
            break;
        }
        out.append(text, pos, open - pos);
        std::string name = text.substr(open + 2, close - open - 2);
        auto it = values.find(name);
        if (it != values.end()) {
            out += it->second;
        } else {
            out.append(text, open, close - open + 1);
        }
        pos = close + 1;
    }
    return out;
}

Result<std::vector<Combination>> expand(const TaskTemplate& task_template) {
    if (auto st = task_template.validate(); !st) return st.error();

    std::vector<std::vector<std::string>> value_lists;
    for (const auto& domain : task_template.domains) {
        auto values = domain.expand_values();
        if (!values) return values.error();
        value_lists.push_back(std::move(values.value()));
    }

    std::size_t total = 1;
    for (const auto& list : value_lists) total *= list.size();

    std::vector<Combination> combinations;
    combinations.reserve(total);
    std::vector<std::size_t> odometer(value_lists.size(), 0);
    for (std::size_t n = 0; n < total; ++n) {
        Combination combo;
        for (std::size_t d = 0; d < value_lists.size(); ++d) {
            combo.values[task_template.domains[d].name] = value_lists[d][odometer[d]];
            combo.value_tuple.push_back(value_lists[d][odometer[d]]);
        }
        for (const auto& command : task_template.commands) {
            TemplateCommand concrete;
            concrete.command = substitute(command.command, combo.values);
            for (const auto& arg : command.args) concrete.args.push_back(substitute(arg, combo.values));
            combo.commands.push_back(std::move(concrete));
        }
        for (const auto& spec : task_template.input_specs) combo.inputs.push_back(substitute(spec, combo.values));
        for (const auto& spec : task_template.output_specs) combo.outputs.push_back(substitute(spec, combo.values));
        combinations.push_back(std::move(combo));

        // Odometer: last declared domain spins fastest.
        for (std::size_t d = value_lists.size(); d-- > 0;) {
            if (++odometer[d] < value_lists[d].size()) break;
            odometer[d] = 0;
        }
    }
    return combinations;
}

Result<SweepReport> run_sweep(app::Application& app, const TaskTemplate& task_template,
                              const store::DataChannelSpec& channel, int timeout_ms) {
    auto combinations = expand(task_template);
    if (!combinations) return combinations.error();

    std::vector<models::TaskUnit> tasks;
    for (const auto& combo : combinations.value()) {
        models::TaskUnit unit;
        unit.operation = "run_sequence";
        json commands = json::array();
        for (const auto& command : combo.commands) {
            commands.push_back({{"command", command.command}, {"args", command.args}});
        }
        unit.parameters = {{"commands", commands}};
        if (!channel.scheme.empty()) {
            for (const auto& name : combo.inputs) {
                store::FileDescriptor fd;
                fd.logical_name = name;
                fd.channel = channel;
                fd.direction = store::Direction::Input;
                unit.staging.inputs.push_back(fd);
            }
            for (const auto& name : combo.outputs) {
                store::FileDescriptor fd;
                fd.logical_name = name;
                fd.channel = channel;
                fd.direction = store::Direction::Output;
                unit.staging.outputs.push_back(fd);
            }
        }
        tasks.push_back(std::move(unit));
    }

    auto results = models::run_tasks(app, tasks, false, timeout_ms);
    if (!results) return results.error();

    SweepReport report;
    report.total = static_cast<std::int64_t>(results.value().size());
    for (std::size_t i = 0; i < results.value().size(); ++i) {
        const auto& result = results.value()[i];
        report.counts_by_state[exec::job_state_name(result.state)] += 1;
        SweepEntry entry;
        entry.value_tuple = combinations.value()[i].value_tuple;
        entry.unit_id = result.unit_id;
        entry.state = result.state;
        entry.failure_cause = result.failure_cause;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Wizard
// ---------------------------------------------------------------------------

namespace {

std::string prompt_line(std::istream& in, std::ostream& out, const std::string& prompt) {
    out << prompt;
    out.flush();
    std::string line;
    std::getline(in, line);
    return line;
}

std::vector<std::string> tokenize(const std::string& line) {
    std::stringstream stream(line);
    std::vector<std::string> tokens;
    std::string token;
    while (stream >> token) tokens.push_back(token);
    return tokens;
}

}  // namespace

Result<TaskTemplate> wizard(std::istream& in, std::ostream& out) {
    TaskTemplate result;

    // 1. executable
    while (result.executable.empty()) {
        result.executable = prompt_line(in, out, "Executable to run: ");
        if (!in) return make_error(errc::invalid_request, "input ended during wizard");
    }

    // 2. parameters and their domains
    out << "Declare parameters (empty name finishes).\n";
    while (true) {
        std::string name = prompt_line(in, out, "  parameter name: ");
        if (name.empty()) break;
        std::string kind = prompt_line(in, out, "  kind (range/enum): ");
        if (kind == "range") {
            while (true) {
                std::string spec = prompt_line(in, out, "  start step count: ");
                auto tokens = tokenize(spec);
                if (tokens.size() == 3) {
                    try {
                        double start = std::stod(tokens[0]);
                        double step = std::stod(tokens[1]);
                        int count = std::stoi(tokens[2]);
                        auto domain = range_domain(name, start, step, count);
                        if (auto values = domain.expand_values()) {
                            result.domains.push_back(std::move(domain));
                            break;
                        } else {
                            out << "  invalid: " << values.error().message << "\n";
                        }
                    } catch (...) {
                        out << "  invalid numbers, try again\n";
                    }
                } else {
                    out << "  expected three values\n";
                }
            }
        } else {
            while (true) {
                std::string spec = prompt_line(in, out, "  values (space separated): ");
                auto values = tokenize(spec);
                auto domain = enum_domain(name, values);
                if (auto expanded = domain.expand_values()) {
                    result.domains.push_back(std::move(domain));
                    break;
                } else {
                    out << "  invalid: " << expanded.error().message << " — try again\n";
                }
            }
        }
    }

    // 3. input files
    out << "Input files (one per line, empty line finishes).\n";
    while (true) {
        std::string line = prompt_line(in, out, "  input: ");
        if (line.empty()) break;
        result.input_specs.push_back(line);
    }

    // 4. output files
    out << "Output files (one per line, empty line finishes).\n";
    while (true) {
        std::string line = prompt_line(in, out, "  output: ");
        if (line.empty()) break;
        result.output_specs.push_back(line);
    }

    // 5. command sequence
    out << "Command sequence (one per line, empty line finishes; default runs the executable).\n";
    while (true) {
        std::string line = prompt_line(in, out, "  command: ");
        if (line.empty()) break;
        auto tokens = tokenize(line);
        TemplateCommand command;
        command.command = tokens.front();
        command.args.assign(tokens.begin() + 1, tokens.end());
        result.commands.push_back(std::move(command));
    }
    if (result.commands.empty()) {
        result.commands.push_back(TemplateCommand{result.executable, {}});
    }

    std::vector<std::string> warnings;
    if (auto st = result.validate(&warnings); !st) {
        out << "template invalid: " << st.error().to_string() << "\n";
        return st.error();
    }
    for (const auto& warning : warnings) out << "warning: " << warning << "\n";
    return result;
}

}  // namespace deskgrid::sweep
