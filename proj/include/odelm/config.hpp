#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>

#include "odelm/errors.hpp"

namespace odelm {

// Plain-text key=value config ('#' starts a comment, blank lines ignored).
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot open config file '" + path + "'");
        KvConfig cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ContractViolation("config '" + path + "' line " + std::to_string(lineno) +
                                        ": expected key=value");
            cfg.kv_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    void set(const std::string& k, const std::string& v) { kv_[k] = v; }
    bool has(const std::string& k) const { return kv_.count(k) != 0; }

    std::string gets(const std::string& k, const std::string& dflt) const {
        auto it = kv_.find(k);
        return it == kv_.end() ? dflt : it->second;
    }
    long long geti(const std::string& k, long long dflt) const {
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        try {
            return std::stoll(it->second);
        } catch (...) {
            throw ContractViolation("config key '" + k + "': expected integer, got '" + it->second + "'");
        }
    }
    double getd(const std::string& k, double dflt) const {
        auto it = kv_.find(k);
        if (it == kv_.end()) return dflt;
        try {
            return std::stod(it->second);
        } catch (...) {
            throw ContractViolation("config key '" + k + "': expected number, got '" + it->second + "'");
        }
    }

    // typo guard: every present key must be known
    void require_known(const std::set<std::string>& known) const {
        for (const auto& [k, v] : kv_)
            if (!known.count(k)) throw ContractViolation("unknown config key '" + k + "'");
    }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace odelm
