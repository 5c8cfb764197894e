#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "odelm/train.hpp"

namespace odelm {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

// One JSON object per line, one line per training step.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) : path_(path), out_(path) {
        if (!out_) throw IoError("cannot open metrics file '" + path + "' for writing");
    }

    void write(const MetricsRecord& r) {
        nlohmann::json j;
        j["step"] = r.step;
        j["loss"] = r.loss;
        j["total_grad_norm"] = r.total_grad_norm;
        j["ode_grad_norm"] = r.ode_grad_norm;
        j["alpha"] = r.alpha;
        j["exploded"] = r.exploded;
        j["vanished"] = r.vanished;
        out_ << j.dump() << "\n";
        if (!out_) throw IoError("write to metrics file '" + path_ + "' failed");
    }

    void flush() { out_.flush(); }

private:
    std::string path_;
    std::ofstream out_;
};

// Comma-separated report with a header row; floats carry 6 significant digits.
inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open report file '" + path + "' for writing");
    for (std::size_t i = 0; i < header.size(); ++i) out << header[i] << (i + 1 < header.size() ? "," : "\n");
    for (const auto& row : rows) {
        if (row.size() != header.size()) throw ContractViolation("csv row width does not match header");
        for (std::size_t i = 0; i < row.size(); ++i) out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
    if (!out) throw IoError("write to report file '" + path + "' failed");
}

inline std::string csv_num(double v) { return fmt_g(v, 6); }

}  // namespace odelm
