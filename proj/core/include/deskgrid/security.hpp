#pragma once

#include "deskgrid/common.hpp"

#include <atomic>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

namespace deskgrid::security {

/// Opaque user credentials; the provider decides what the token means.
struct Credentials {
    std::string user_id;
    std::string token;
};

struct Principal {
    std::string user_id;
    std::set<std::string> roles;
};

enum class Action { Submit, Reserve, Admin };

const char* action_name(Action action);

/// Separates authentication (who the user is) from authorization (what the
/// user may do). Providers keep audit counters so tests can assert that every
/// guarded code path performs exactly one check before taking effect.
class SecurityProvider {
public:
    virtual ~SecurityProvider() = default;
    virtual std::string name() const = 0;

    Result<Principal> authenticate(const Credentials& credentials) {
        authenticate_calls_.fetch_add(1);
        return do_authenticate(credentials);
    }
    bool authorize(const Principal& principal, Action action) {
        authorize_calls_.fetch_add(1);
        return do_authorize(principal, action);
    }

    int authenticate_calls() const { return authenticate_calls_.load(); }
    int authorize_calls() const { return authorize_calls_.load(); }

protected:
    virtual Result<Principal> do_authenticate(const Credentials& credentials) = 0;
    virtual bool do_authorize(const Principal& principal, Action action) = 0;

private:
    std::atomic<int> authenticate_calls_{0};
    std::atomic<int> authorize_calls_{0};
};

/// No security at all: every credential authenticates and every action is
/// allowed.
class AnonymousProvider : public SecurityProvider {
public:
    std::string name() const override { return "anonymous"; }

protected:
    Result<Principal> do_authenticate(const Credentials& credentials) override;
    bool do_authorize(const Principal&, Action) override { return true; }
};

/// Credential-file provider. Each line is `user_id:sha256(token):role,role`.
/// Authorization is a static action matrix over the user's roles.
class TokenProvider : public SecurityProvider {
public:
    /// Loads the credential file; malformed lines are rejected.
    static Result<std::unique_ptr<TokenProvider>> load(const std::string& credential_file);
    /// In-memory variant for tests and embedded setups.
    static std::unique_ptr<TokenProvider> from_entries(
        const std::vector<std::tuple<std::string, std::string, std::set<std::string>>>& user_token_roles);

    std::string name() const override { return "token"; }

protected:
    Result<Principal> do_authenticate(const Credentials& credentials) override;
    bool do_authorize(const Principal& principal, Action action) override;

private:
    struct Entry {
        std::string token_hash;
        std::set<std::string> roles;
    };
    std::map<std::string, Entry> users_;
};

/// Role required per action; the matrix is fixed.
const char* required_role(Action action);

Result<std::unique_ptr<SecurityProvider>> make_security_provider(const std::string& name,
                                                                 const std::string& credential_file);

}  // namespace deskgrid::security
