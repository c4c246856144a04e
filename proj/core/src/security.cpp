#include "deskgrid/security.hpp"

#include <fstream>
#include <sstream>

namespace deskgrid::security {

const char* action_name(Action action) {
    switch (action) {
        case Action::Submit: return "submit";
        case Action::Reserve: return "reserve";
        case Action::Admin: return "admin";
    }
    return "?";
}

const char* required_role(Action action) { return action_name(action); }

Result<Principal> AnonymousProvider::do_authenticate(const Credentials& credentials) {
    Principal p;
    p.user_id = credentials.user_id.empty() ? "anonymous" : credentials.user_id;
    p.roles = {"submit", "reserve", "admin"};
    return p;
}

Result<std::unique_ptr<TokenProvider>> TokenProvider::load(const std::string& credential_file) {
    std::ifstream in(credential_file);
    if (!in) return make_error(errc::store_unavailable, "cannot open credential file: " + credential_file);
    auto provider = std::make_unique<TokenProvider>();
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        auto first = line.find(':');
        auto second = line.find(':', first == std::string::npos ? first : first + 1);
        if (first == std::string::npos || second == std::string::npos) {
            return make_error(errc::invalid_request,
                              "malformed credential line " + std::to_string(line_no) + " in " + credential_file);
        }
        Entry entry;
        std::string user = line.substr(0, first);
        entry.token_hash = line.substr(first + 1, second - first - 1);
        std::stringstream roles(line.substr(second + 1));
        std::string role;
        while (std::getline(roles, role, ',')) {
            if (!role.empty()) entry.roles.insert(role);
        }
        provider->users_[user] = std::move(entry);
    }
    return provider;
}

std::unique_ptr<TokenProvider> TokenProvider::from_entries(
    const std::vector<std::tuple<std::string, std::string, std::set<std::string>>>& user_token_roles) {
    auto provider = std::make_unique<TokenProvider>();
    for (const auto& [user, token, roles] : user_token_roles) {
        provider->users_[user] = Entry{sha256_hex(token), roles};
    }
    return provider;
}

Result<Principal> TokenProvider::do_authenticate(const Credentials& credentials) {
    auto it = users_.find(credentials.user_id);
    // Denied carries no detail: do not reveal whether the user or the token
    // was wrong.
    if (it == users_.end()) return make_error(errc::denied, "denied");
    if (sha256_hex(credentials.token) != it->second.token_hash) return make_error(errc::denied, "denied");
    Principal p;
    p.user_id = credentials.user_id;
    p.roles = it->second.roles;
    return p;
}

bool TokenProvider::do_authorize(const Principal& principal, Action action) {
    return principal.roles.count(required_role(action)) > 0;
}

Result<std::unique_ptr<SecurityProvider>> make_security_provider(const std::string& name,
                                                                 const std::string& credential_file) {
    if (name == "anonymous" || name.empty()) return std::unique_ptr<SecurityProvider>(new AnonymousProvider());
    if (name == "token") {
        auto provider = TokenProvider::load(credential_file);
        if (!provider) return provider.error();
        return std::unique_ptr<SecurityProvider>(std::move(provider.value()));
    }
    return make_error(errc::invalid_request, "unknown security provider: " + name);
}

}  // namespace deskgrid::security
