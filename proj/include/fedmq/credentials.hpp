#ifndef FEDMQ_CREDENTIALS_HPP
#define FEDMQ_CREDENTIALS_HPP

// Broker credentials and ACL files (docs/file-formats.md).
//
// credentials file, one client per line, fields separated by single spaces:
//   <client_id> <username> <salt hex> pbkdf2-sha256$<iterations>$<hash hex> <enabled 0|1>
// acl file, one rule per line:
//   <client_id> <publish|subscribe> <topic filter>
// Blank lines and lines starting with '#' are ignored in both.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedmq/bytes.hpp"
#include "fedmq/crypto.hpp"
#include "fedmq/errors.hpp"
#include "fedmq/topic.hpp"

namespace fedmq {

struct client_credentials {
    std::string client_id;
    std::string username;
    bytes salt;
    std::uint32_t iterations = default_kdf_iterations;
    bytes secret_hash;
    bool enabled = true;
    std::vector<acl_rule> acl;
};

enum class auth_result { ok, unknown_user, bad_secret, disabled };

class credentials_store {
public:
    /// Salted PBKDF2 record for a new client; the secret is not kept.
    static client_credentials make(std::string client_id, std::string username, std::string_view secret,
                                   std::vector<acl_rule> acl, std::uint32_t iterations = default_kdf_iterations) {
        client_credentials c;
        c.client_id = std::move(client_id);
        c.username = std::move(username);
        c.salt = random_bytes(16);
        c.iterations = iterations;
        c.secret_hash = pbkdf2_sha256(std::span(reinterpret_cast<const std::uint8_t*>(secret.data()), secret.size()),
                                      c.salt, iterations);
        c.acl = std::move(acl);
        return c;
    }

    void add(client_credentials c) {
        if (!is_valid_identifier(c.client_id))
            throw credentials_error(credentials_errc::parse_error, "invalid client id '" + c.client_id + "'");
        if (!valid_username(c.username))
            throw credentials_error(credentials_errc::parse_error, "invalid username '" + c.username + "'");
        if (clients_.count(c.client_id))
            throw credentials_error(credentials_errc::duplicate_client, "client '" + c.client_id + "' already enrolled");
        for (const auto& [id, other] : clients_)
            if (other.username == c.username)
                throw credentials_error(credentials_errc::duplicate_client,
                                        "username '" + c.username + "' already in use");
        clients_.emplace(c.client_id, std::move(c));
    }

    void set_enabled(std::string_view client_id, bool enabled) {
        auto it = clients_.find(std::string(client_id));
        if (it == clients_.end())
            throw credentials_error(credentials_errc::unknown_client, "unknown client '" + std::string(client_id) + "'");
        it->second.enabled = enabled;
    }

    const client_credentials* find(std::string_view client_id) const {
        auto it = clients_.find(std::string(client_id));
        return it == clients_.end() ? nullptr : &it->second;
    }

    const client_credentials* find_by_username(std::string_view username) const {
        for (const auto& [id, c] : clients_)
            if (c.username == username) return &c;
        return nullptr;
    }

    auth_result authenticate(std::string_view username, std::span<const std::uint8_t> secret,
                             const client_credentials** out = nullptr) const {
        const auto* c = find_by_username(username);
        if (!c) return auth_result::unknown_user;
        if (out) *out = c;
        auto h = pbkdf2_sha256(secret, c->salt, c->iterations);
        if (!constant_time_equal(h, c->secret_hash)) return auth_result::bad_secret;
        if (!c->enabled) return auth_result::disabled;
        return auth_result::ok;
    }

    const std::map<std::string, client_credentials>& clients() const noexcept { return clients_; }

    // ---- files

    static credentials_store load(const std::filesystem::path& creds_path, const std::filesystem::path& acl_path) {
        credentials_store s;
        std::ifstream creds(creds_path);
        if (!creds) throw credentials_error(credentials_errc::io_error, "cannot read " + creds_path.string());
        for_each_line(creds, creds_path, [&](const std::vector<std::string>& f, const std::string& where) {
            if (f.size() != 5) fail(where, "expected 5 fields");
            client_credentials c;
            c.client_id = f[0];
            c.username = f[1];
            c.salt = parse_hex(f[2], where);
            auto [iters, hash] = parse_hash(f[3], where);
            c.iterations = iters;
            c.secret_hash = std::move(hash);
            if (f[4] != "0" && f[4] != "1") fail(where, "enabled must be 0 or 1");
            c.enabled = f[4] == "1";
            try {
                s.add(std::move(c));
            } catch (const credentials_error& e) {
                fail(where, e.what());
            }
        });
        std::ifstream acl(acl_path);
        if (!acl) throw credentials_error(credentials_errc::io_error, "cannot read " + acl_path.string());
        for_each_line(acl, acl_path, [&](const std::vector<std::string>& f, const std::string& where) {
            if (f.size() != 3) fail(where, "expected 3 fields");
            auto it = s.clients_.find(f[0]);
            if (it == s.clients_.end()) fail(where, "rule for unknown client '" + f[0] + "'");
            auto action = action_from_word(f[1]);
            if (!action) fail(where, "action must be publish or subscribe");
            auto filter = topic_filter::try_parse(f[2]);
            if (!filter) fail(where, "invalid topic filter '" + f[2] + "'");
            it->second.acl.push_back({*action, *filter});
        });
        return s;
    }

    /// Writes both files via temp-then-rename.
    void save(const std::filesystem::path& creds_path, const std::filesystem::path& acl_path) const {
        std::ostringstream creds, acl;
        creds << "# client_id username salt hash enabled\n";
        acl << "# client_id action filter\n";
        for (const auto& [id, c] : clients_) {
            creds << c.client_id << ' ' << c.username << ' ' << to_hex(c.salt) << " pbkdf2-sha256$" << c.iterations
                  << '$' << to_hex(c.secret_hash) << ' ' << (c.enabled ? 1 : 0) << '\n';
            for (const auto& r : c.acl) acl << c.client_id << ' ' << action_word(r.action) << ' ' << r.filter.str() << '\n';
        }
        write_atomic(creds_path, creds.str());
        write_atomic(acl_path, acl.str());
    }

private:
    static bool valid_username(std::string_view u) {
        if (u.empty() || u.size() > 256 || !is_mqtt_utf8(u)) return false;
        for (char ch : u)
            if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') return false;
        return true;
    }

    [[noreturn]] static void fail(const std::string& where, const std::string& why) {
        throw credentials_error(credentials_errc::parse_error, where + ": " + why);
    }

    template <typename F>
    static void for_each_line(std::istream& in, const std::filesystem::path& path, F&& f) {
        std::string line;
        for (std::size_t n = 1; std::getline(in, line); ++n) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line[0] == '#') continue;
            std::vector<std::string> fields;
            std::istringstream ss(line);
            for (std::string w; ss >> w;) fields.push_back(w);
            if (fields.empty()) continue;
            f(fields, path.string() + ":" + std::to_string(n));
        }
    }

    static bytes parse_hex(const std::string& s, const std::string& where) {
        try {
            auto b = from_hex(s);
            if (b.empty()) fail(where, "empty hex field");
            return b;
        } catch (const std::invalid_argument&) {
            fail(where, "invalid hex '" + s + "'");
        }
    }

    static std::pair<std::uint32_t, bytes> parse_hash(const std::string& s, const std::string& where) {
        const std::string prefix = "pbkdf2-sha256$";
        if (s.rfind(prefix, 0) != 0) fail(where, "hash must start with " + prefix);
        auto rest = s.substr(prefix.size());
        auto dollar = rest.find('$');
        if (dollar == std::string::npos) fail(where, "hash must be pbkdf2-sha256$<iterations>$<hex>");
        std::uint32_t iters = 0;
        try {
            std::size_t used = 0;
            auto v = std::stoul(rest.substr(0, dollar), &used);
            if (used != dollar || v == 0 || v > 10'000'000) throw std::out_of_range("iterations");
            iters = static_cast<std::uint32_t>(v);
        } catch (const std::exception&) {
            fail(where, "bad iteration count");
        }
        return {iters, parse_hex(rest.substr(dollar + 1), where)};
    }

    static void write_atomic(const std::filesystem::path& p, const std::string& text) {
        auto tmp = p;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            out << text;
            out.flush();
            if (!out) throw credentials_error(credentials_errc::io_error, "cannot write " + tmp.string());
        }
        std::error_code ec;
        std::filesystem::rename(tmp, p, ec);
        if (ec) throw credentials_error(credentials_errc::io_error, "cannot replace " + p.string());
    }

    std::map<std::string, client_credentials> clients_;
};

} // namespace fedmq

#endif // FEDMQ_CREDENTIALS_HPP
