#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/numerics/params.hpp"

namespace medkit::model {

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

// Per-epoch training history, optionally mirrored to a CSV file with header
// "epoch,loss,lr,seconds".
class TrainingLog {
public:
    TrainingLog() = default;

    explicit TrainingLog(const std::filesystem::path& csv) : file_{std::ofstream(csv)} {
        if (!*file_) {
            throw IoError("cannot write training log " + csv.string());
        }
        *file_ << "epoch,loss,lr,seconds\n";
    }

    void start_epoch() { started_ = std::chrono::steady_clock::now(); }

    void end_epoch(std::size_t epoch, double loss, double lr) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
        records_.push_back({epoch, loss, lr, secs});
        if (file_) {
            file_->precision(17);
            *file_ << epoch << ',' << loss << ',' << lr << ',' << secs << '\n';
            file_->flush();
        }
    }

    const std::vector<EpochRecord>& records() const { return records_; }

    std::vector<double> losses() const {
        std::vector<double> out;
        for (const auto& r : records_) {
            out.push_back(r.loss);
        }
        return out;
    }

private:
    std::optional<std::ofstream> file_;
    std::vector<EpochRecord> records_;
    std::chrono::steady_clock::time_point started_ = std::chrono::steady_clock::now();
};

// Parameter values captured at a known-good point, for rollback after a
// non-finite loss.
class Snapshot {
public:
    explicit Snapshot(const ParamList& params) { capture(params); }

    void capture(const ParamList& params) {
        values_.clear();
        for (const auto& p : params) {
            values_.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
        }
    }

    void restore(ParamList& params) const {
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto dst = params[k].tensor.mutable_data();
            std::copy(values_[k].begin(), values_[k].end(), dst.begin());
        }
    }

private:
    std::vector<std::vector<double>> values_;
};

}  // namespace medkit::model
