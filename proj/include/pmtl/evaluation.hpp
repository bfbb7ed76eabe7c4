#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmtl/synthdata.hpp"
#include "pmtl/tensor.hpp"

namespace pmtl {

struct MetricValue {
    std::string task;
    std::string metric;
    Scalar value = 0;
};

struct MetricReport {
    std::string protocol;
    std::vector<MetricValue> rows;

    const MetricValue* find(const std::string& task) const;
    void save_csv(const std::string& path) const;
    static MetricReport load_csv(const std::string& path);
};

// ---------------------------------------------------------------------------
// Mergeable accumulators. Per-shard accumulation followed by merge() is
// bit-identical to a single pass: counting metrics use integers, and the
// floating-point metrics keep per-sample partial sums that are reduced in
// sample-id order.
// ---------------------------------------------------------------------------

class MIoUAccumulator {
   public:
    MIoUAccumulator() = default;
    explicit MIoUAccumulator(int n_classes);
    void add(const IntTensor& pred, const IntTensor& label);
    void merge(const MIoUAccumulator& other);
    bool empty() const { return total_ == 0; }
    Scalar value() const;  // mean IoU over classes present in labels

   private:
    int n_classes_ = 0;
    std::vector<std::int64_t> confusion_;  // [label, pred]
    std::int64_t total_ = 0;
};

// Keyed per-sample (sum, count) pairs; value() reduces in sample-id order.
class MeanAccumulator {
   public:
    void add(std::int64_t sample_id, Scalar sum, std::int64_t count);
    void merge(const MeanAccumulator& other);
    bool empty() const { return entries_.empty(); }
    Scalar value() const;

   private:
    std::vector<std::pair<std::int64_t, std::pair<Scalar, std::int64_t>>> entries_;
};

class FMeasureAccumulator {
   public:
    explicit FMeasureAccumulator(int n_thresholds = 255);
    void add(const Tensor& prob, const IntTensor& label);
    void merge(const FMeasureAccumulator& other);
    bool has_positives() const { return positives_ > 0; }
    bool empty() const { return seen_ == 0; }
    // Maximum F1 over the shared threshold sweep; this is also the
    // dataset-scale optimal threshold value used for odsF.
    Scalar max_f() const;
    Scalar threshold(int j) const;

   private:
    std::vector<std::int64_t> tp_, fp_, fn_;
    std::int64_t positives_ = 0;
    std::int64_t seen_ = 0;
};

// ---------------------------------------------------------------------------
// Metric entry points
// ---------------------------------------------------------------------------

Scalar miou(const IntTensor& pred_classes, const IntTensor& labels, int n_classes);

// Mean per-pixel angle between unit-normalized fields, in degrees.
// Inputs are renormalized with an epsilon floor first.
Scalar mean_angular_error(const Tensor& pred_normals, const Tensor& label_normals);

Scalar abs_err(const Tensor& pred_depth, const Tensor& label_depth);

// Max F1 over 255 uniform thresholds j/255 (j = 0..254), pixel-exact over the
// whole set. Requires at least one positive label pixel.
Scalar max_f_measure(const Tensor& pred_prob, const IntTensor& binary_labels);

// Single dataset-wide optimal threshold with pixel-exact matching (no
// boundary correspondence tolerance).
Scalar ods_f_measure(const Tensor& pred_boundary_prob, const IntTensor& boundary_labels);

// ---------------------------------------------------------------------------
// Run comparison (ablation rows)
// ---------------------------------------------------------------------------

struct RunComparison {
    struct Row {
        std::string task;
        std::string metric;
        Scalar value_a = 0, value_b = 0;
        Scalar delta = 0;  // positive means b improves on a
        bool higher_better = true;
    };
    std::vector<Row> rows;
    Scalar mean_rank_a = 0, mean_rank_b = 0;

    void save_csv(const std::string& path) const;
};

RunComparison compare_runs(const MetricReport& a, const MetricReport& b);

std::string metric_name_for(const TaskDescriptor& task);
bool metric_higher_better(const std::string& metric);

}  // namespace pmtl
