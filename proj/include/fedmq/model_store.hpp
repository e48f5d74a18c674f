#ifndef FEDMQ_MODEL_STORE_HPP
#define FEDMQ_MODEL_STORE_HPP

// Versioned global-model registry. On-disk layout (docs/file-formats.md):
//
//   <root>/<fed>/<cep>/v000001.model   exact GlobalModel body bytes
//   <root>/<fed>/<cep>/MANIFEST        one line per version:
//       <version> TAB <round> TAB <created_at> TAB <sha256 hex> TAB <contributors, comma-joined or ->
//
// A version becomes visible only once its manifest line (newline included)
// is on disk. Files are written temp-then-rename and fsynced.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedmq/bytes.hpp"
#include "fedmq/crypto.hpp"
#include "fedmq/errors.hpp"
#include "fedmq/payload.hpp"
#include "fedmq/topic.hpp"

namespace fedmq {

struct model_record {
    std::string fed;
    std::string cep;
    model_list_entry entry;
    bytes body;
};

/// Points inside store_model where the test hook may simulate a crash.
enum class store_crash_point { after_temp_write, after_rename, mid_manifest };

namespace detail {

inline void fsync_path(const std::filesystem::path& p, bool directory) {
    int fd = ::open(p.c_str(), directory ? O_RDONLY | O_DIRECTORY : O_RDONLY);
    if (fd < 0) throw store_error(store_errc::storage_failure, "cannot open " + p.string() + " for fsync");
    int rc = ::fsync(fd);
    ::close(fd);
    if (rc != 0) throw store_error(store_errc::storage_failure, "fsync failed on " + p.string());
}

inline void write_file_synced(const std::filesystem::path& p, std::span<const std::uint8_t> data) {
    int fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) throw store_error(store_errc::storage_failure, "cannot create " + p.string());
    std::size_t off = 0;
    while (off < data.size()) {
        auto n = ::write(fd, data.data() + off, data.size() - off);
        if (n <= 0) {
            ::close(fd);
            throw store_error(store_errc::storage_failure, "write failed on " + p.string());
        }
        off += static_cast<std::size_t>(n);
    }
    int rc = ::fsync(fd);
    ::close(fd);
    if (rc != 0) throw store_error(store_errc::storage_failure, "fsync failed on " + p.string());
}

inline std::optional<bytes> read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) return std::nullopt;
    return bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::string version_file_name(std::uint32_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "v%06u.model", v);
    return buf;
}

inline std::string manifest_line(const model_list_entry& e) {
    std::string contributors;
    for (const auto& c : e.contributors) contributors += (contributors.empty() ? "" : ",") + c;
    if (contributors.empty()) contributors = "-";
    return std::to_string(e.model_version) + '\t' + std::to_string(e.round) + '\t' + std::to_string(e.created_at) +
           '\t' + to_hex(e.digest) + '\t' + contributors + '\n';
}

inline std::optional<model_list_entry> parse_manifest_line(const std::string& line) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string part; std::getline(ss, part, '\t');) f.push_back(part);
    if (f.size() != 5) return std::nullopt;
    try {
        model_list_entry e;
        std::size_t used = 0;
        auto v = std::stoull(f[0], &used);
        if (used != f[0].size() || v == 0 || v > 0xFFFFFFFFull) return std::nullopt;
        e.model_version = static_cast<std::uint32_t>(v);
        auto r = std::stoull(f[1], &used);
        if (used != f[1].size() || r > 0xFFFFFFFFull) return std::nullopt;
        e.round = static_cast<std::uint32_t>(r);
        e.created_at = std::stoull(f[2], &used);
        if (used != f[2].size()) return std::nullopt;
        auto d = from_hex(f[3]);
        if (d.size() != 32) return std::nullopt;
        std::copy(d.begin(), d.end(), e.digest.begin());
        if (f[4] != "-") {
            std::stringstream cs(f[4]);
            for (std::string c; std::getline(cs, c, ',');) {
                if (!is_valid_identifier(c)) return std::nullopt;
                e.contributors.push_back(c);
            }
        }
        return e;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

} // namespace detail

class model_store {
public:
    using clock_fn = std::function<std::uint64_t()>;
    using crash_hook = std::function<void(store_crash_point)>;

    enum class mode { read_write, read_only };

    explicit model_store(std::filesystem::path root, clock_fn clock = unix_seconds, mode m = mode::read_write)
        : root_(std::move(root)), clock_(std::move(clock)), mode_(m) {
        if (mode_ == mode::read_only) return;
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) throw store_error(store_errc::storage_failure, "cannot create store root " + root_.string());
    }

    static std::uint64_t unix_seconds() {
        return static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
                .count());
    }

    /// Test hook: invoked at each crash point; throwing from it aborts the
    /// store at that point, like a process crash.
    void set_crash_hook(crash_hook hook) { hook_ = std::move(hook); }

    const std::filesystem::path& root() const noexcept { return root_; }

    model_record store_model(const identifier& fed, const identifier& cep, std::uint32_t round,
                             std::vector<std::string> contributors, bytes body) {
        if (mode_ == mode::read_only) throw store_error(store_errc::storage_failure, "store opened read-only");
        try {
            (void)decode_parameters(body);
        } catch (const payload_error& e) {
            throw store_error(store_errc::corrupt_body, std::string("model body does not decode: ") + e.what());
        }
        for (const auto& c : contributors)
            if (!is_valid_identifier(c)) throw store_error(store_errc::corrupt_body, "invalid contributor id " + c);

        std::unique_lock lock(mu_);
        auto& idx = index_for(fed.str(), cep.str());
        auto dir = dir_for(fed.str(), cep.str());
        std::error_code ec;
        std::filesystem::create_directories(dir, ec);
        if (ec) throw store_error(store_errc::storage_failure, "cannot create " + dir.string());

        model_list_entry e;
        e.model_version = idx.empty() ? 1 : idx.back().model_version + 1;
        e.round = round;
        e.created_at = clock_();
        e.contributors = std::move(contributors);
        e.digest = sha256(body);

        auto final_path = dir / detail::version_file_name(e.model_version);
        auto tmp_path = final_path;
        tmp_path += ".tmp";
        detail::write_file_synced(tmp_path, body);
        crash(store_crash_point::after_temp_write);
        std::filesystem::rename(tmp_path, final_path, ec);
        if (ec) throw store_error(store_errc::storage_failure, "rename failed: " + ec.message());
        detail::fsync_path(dir, true);
        crash(store_crash_point::after_rename);

        auto line = detail::manifest_line(e);
        append_manifest(dir / "MANIFEST", line);
        idx.push_back(e);
        return {fed.str(), cep.str(), e, std::move(body)};
    }

    /// Entries sorted by version; an unknown pair yields an empty list.
    std::vector<model_list_entry> list_models(const identifier& fed, const identifier& cep) const {
        std::unique_lock lock(mu_);
        return index_for(fed.str(), cep.str());
    }

    std::uint32_t latest_version(const identifier& fed, const identifier& cep) const {
        std::unique_lock lock(mu_);
        const auto& idx = index_for(fed.str(), cep.str());
        return idx.empty() ? 0 : idx.back().model_version;
    }

    /// Exact stored body; the digest is re-checked before anything is returned.
    bytes fetch_model(const identifier& fed, const identifier& cep, std::uint32_t version) const {
        model_list_entry e;
        {
            std::unique_lock lock(mu_);
            const auto& idx = index_for(fed.str(), cep.str());
            if (version == 0 || version > idx.size())
                throw store_error(store_errc::unknown_version, "no model version " + std::to_string(version));
            e = idx[version - 1];
        }
        auto body = detail::read_file(dir_for(fed.str(), cep.str()) / detail::version_file_name(version));
        if (!body) throw store_error(store_errc::integrity_failure, "model file missing for version " +
                                                                       std::to_string(version));
        if (sha256(*body) != e.digest)
            throw store_error(store_errc::integrity_failure, "digest mismatch for version " + std::to_string(version));
        return std::move(*body);
    }

    /// Human-readable manifest dump used by `admin models`.
    std::string describe(const identifier& fed, const identifier& cep) const {
        std::ostringstream out;
        out << "version\tround\tcreated_at\tsha256\tcontributors\n";
        for (const auto& e : list_models(fed, cep)) out << detail::manifest_line(e);
        return out.str();
    }

private:
    using key = std::pair<std::string, std::string>;

    std::filesystem::path dir_for(const std::string& fed, const std::string& cep) const {
        if (!is_valid_identifier(fed) || !is_valid_identifier(cep))
            throw store_error(store_errc::storage_failure, "invalid federation identifiers");
        return root_ / fed / cep;
    }

    void crash(store_crash_point p) {
        if (hook_) hook_(p);
    }

    void append_manifest(const std::filesystem::path& path, const std::string& line) {
        int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
        if (fd < 0) throw store_error(store_errc::storage_failure, "cannot open " + path.string());
        auto write_all = [&](const char* p, std::size_t n) {
            while (n > 0) {
                auto w = ::write(fd, p, n);
                if (w <= 0) {
                    ::close(fd);
                    throw store_error(store_errc::storage_failure, "manifest append failed");
                }
                p += w;
                n -= static_cast<std::size_t>(w);
            }
        };
        std::size_t half = line.size() / 2;
        write_all(line.data(), half);
        try {
            crash(store_crash_point::mid_manifest);
        } catch (...) {
            ::close(fd);
            throw;
        }
        write_all(line.data() + half, line.size() - half);
        int rc = ::fsync(fd);
        ::close(fd);
        if (rc != 0) throw store_error(store_errc::storage_failure, "manifest fsync failed");
    }

    // Loads (and repairs) one pair's manifest on first use.
    std::vector<model_list_entry>& index_for(const std::string& fed, const std::string& cep) const {
        auto it = index_.find({fed, cep});
        if (it != index_.end()) return it->second;
        auto& idx = index_[{fed, cep}];
        auto dir = dir_for(fed, cep);
        if (!std::filesystem::exists(dir)) return idx;
        recover(dir, idx, mode_ == mode::read_write);
        return idx;
    }

    // Keeps the longest valid manifest prefix whose version files exist. With
    // `repair`, truncates anything after it and removes temp files and
    // version files the manifest does not reference.
    static void recover(const std::filesystem::path& dir, std::vector<model_list_entry>& idx, bool repair) {
        auto manifest_path = dir / "MANIFEST";
        auto raw = detail::read_file(manifest_path).value_or(bytes{});
        std::string text(raw.begin(), raw.end());
        std::size_t pos = 0, good_bytes = 0;
        while (pos < text.size()) {
            auto nl = text.find('\n', pos);
            if (nl == std::string::npos) break;
            auto e = detail::parse_manifest_line(text.substr(pos, nl - pos));
            if (!e || e->model_version != idx.size() + 1) break;
            if (!std::filesystem::exists(dir / detail::version_file_name(e->model_version))) break;
            idx.push_back(std::move(*e));
            pos = nl + 1;
            good_bytes = pos;
        }
        if (!repair) return;
        if (good_bytes != text.size()) {
            std::error_code ec;
            std::filesystem::resize_file(manifest_path, good_bytes, ec);
            if (ec) throw store_error(store_errc::storage_failure, "cannot repair manifest: " + ec.message());
        }
        for (const auto& f : std::filesystem::directory_iterator(dir)) {
            auto name = f.path().filename().string();
            if (name == "MANIFEST") continue;
            bool referenced = false;
            for (const auto& e : idx) referenced = referenced || name == detail::version_file_name(e.model_version);
            if (!referenced) std::filesystem::remove(f.path());
        }
    }

    std::filesystem::path root_;
    clock_fn clock_;
    mode mode_;
    crash_hook hook_;
    mutable std::mutex mu_;
    mutable std::map<key, std::vector<model_list_entry>> index_;
};

// ---------------------------------------------------------------------------
// Model request/reply channel

struct model_channel_reply {
    std::string topic;
    envelope env;
};

/// Serves one request that arrived on `<fed>/<cep>/model_request/<client>`.
/// Queries are scoped to the topic's (fed, cep). Every failure becomes a
/// status-coded reply; nullopt only when the topic itself is not a model
/// request topic, so there is nowhere to reply.
inline std::optional<model_channel_reply> handle_model_channel(const model_store& store, std::string_view request_topic,
                                                               std::span<const std::uint8_t> payload,
                                                               std::size_t max_packet = max_remaining_length) {
    auto path = try_parse_topic(request_topic);
    if (!path || path->chan() != channel::model_request) return std::nullopt;
    const auto& fed = path->fed();
    const auto& cep = path->cep();
    const auto& client = *path->client();
    auto reply_topic = render(topic_path::for_client(channel::model_reply, fed, cep, client));

    envelope reply;
    reply.fed = fed.str();
    reply.cep = cep.str();
    reply.client = client.str();

    auto list_reply = [&](reply_status st, std::vector<model_list_entry> entries = {}) {
        reply.kind = envelope_kind::model_list_reply;
        reply.body = encode_model_list_reply({st, std::move(entries)});
    };
    auto download_reply = [&](reply_status st, bytes model = {}) {
        reply.kind = envelope_kind::model_download_reply;
        reply.body = encode_download_reply({st, std::move(model)});
    };

    std::optional<envelope> req;
    try {
        req = decode_envelope(payload);
    } catch (const payload_error&) {
    }
    if (!req || req->fed != fed.str() || req->cep != cep.str() || req->client != client.str()) {
        list_reply(reply_status::malformed_request);
    } else if (req->kind == envelope_kind::model_list_request) {
        if (req->body.empty()) list_reply(reply_status::ok, store.list_models(fed, cep));
        else list_reply(reply_status::malformed_request);
    } else if (req->kind == envelope_kind::model_download_request) {
        reply.model_version = 0;
        try {
            auto version = decode_download_request(req->body);
            reply.model_version = version;
            download_reply(reply_status::ok, store.fetch_model(fed, cep, version));
        } catch (const payload_error&) {
            download_reply(reply_status::malformed_request);
        } catch (const store_error& e) {
            download_reply(e.code() == store_errc::unknown_version     ? reply_status::unknown_version
                           : e.code() == store_errc::integrity_failure ? reply_status::integrity_failure
                                                                       : reply_status::internal_error);
        }
    } else {
        list_reply(reply_status::malformed_request);
    }

    // Size guard: the reply must fit a single publish to the requester.
    std::size_t wire = envelope_overhead(reply) + reply.body.size() + reply_topic.size() + 2 + 4 + 1;
    if (wire > max_packet || wire > max_remaining_length) {
        if (reply.kind == envelope_kind::model_download_reply) download_reply(reply_status::too_large);
        else list_reply(reply_status::too_large);
    }
    return model_channel_reply{std::move(reply_topic), std::move(reply)};
}

} // namespace fedmq

#endif // FEDMQ_MODEL_STORE_HPP
