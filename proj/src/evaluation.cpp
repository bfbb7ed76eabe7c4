#include "pmtl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace pmtl {

const MetricValue* MetricReport::find(const std::string& task) const {
    for (const MetricValue& r : rows) {
        if (r.task == task) return &r;
    }
    return nullptr;
}

void MetricReport::save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write report: " + path);
    // odsF here is pixel-exact with a single dataset-wide threshold; no
    // boundary correspondence tolerance is applied.
    f << "# odsF: dataset-wide optimal threshold, pixel-exact matching\n";
    f << "task,metric,value,protocol\n";
    f.precision(10);
    for (const MetricValue& r : rows) {
        f << r.task << ',' << r.metric << ',' << r.value << ',' << protocol << '\n';
    }
    if (!f) throw IoError("report write failed: " + path);
}

MetricReport MetricReport::load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open report: " + path);
    MetricReport rep;
    std::string line;
    bool header_seen = false;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;  // column header
            continue;
        }
        std::istringstream is(line);
        MetricValue v;
        std::string value_str, protocol;
        if (!std::getline(is, v.task, ',') || !std::getline(is, v.metric, ',') ||
            !std::getline(is, value_str, ',') || !std::getline(is, protocol)) {
            throw ValidationError("report: malformed row: " + line);
        }
        v.value = std::stod(value_str);
        rep.protocol = protocol;
        rep.rows.push_back(std::move(v));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Accumulators
// ---------------------------------------------------------------------------

MIoUAccumulator::MIoUAccumulator(int n_classes) : n_classes_(n_classes) {
    check(n_classes >= 1, "miou: need at least one class");
    confusion_.assign(static_cast<std::size_t>(n_classes) * n_classes, 0);
}

void MIoUAccumulator::add(const IntTensor& pred, const IntTensor& label) {
    check(pred.shape == label.shape, "miou: shape mismatch");
    const std::int64_t n = pred.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int32_t p = pred.data[static_cast<std::size_t>(i)];
        const std::int32_t l = label.data[static_cast<std::size_t>(i)];
        check(p >= 0 && p < n_classes_ && l >= 0 && l < n_classes_,
              "miou: class id out of range");
        ++confusion_[static_cast<std::size_t>(l) * n_classes_ + static_cast<std::size_t>(p)];
    }
    total_ += n;
}

void MIoUAccumulator::merge(const MIoUAccumulator& other) {
    check(n_classes_ == other.n_classes_, "miou merge: class count mismatch");
    for (std::size_t i = 0; i < confusion_.size(); ++i) confusion_[i] += other.confusion_[i];
    total_ += other.total_;
}

Scalar MIoUAccumulator::value() const {
    check(total_ > 0, "miou: empty evaluation set");
    Scalar sum = 0;
    int present = 0;
    for (int c = 0; c < n_classes_; ++c) {
        std::int64_t label_total = 0, pred_total = 0;
        for (int k = 0; k < n_classes_; ++k) {
            label_total += confusion_[static_cast<std::size_t>(c) * n_classes_ + k];
            pred_total += confusion_[static_cast<std::size_t>(k) * n_classes_ + c];
        }
        if (label_total == 0) continue;  // class absent from labels
        const std::int64_t inter = confusion_[static_cast<std::size_t>(c) * n_classes_ + c];
        const std::int64_t uni = label_total + pred_total - inter;
        sum += static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
        ++present;
    }
    check(present > 0, "miou: labels contain no classes");
    return sum / present;
}

void MeanAccumulator::add(std::int64_t sample_id, Scalar sum, std::int64_t count) {
    entries_.emplace_back(sample_id, std::make_pair(sum, count));
}

void MeanAccumulator::merge(const MeanAccumulator& other) {
    entries_.insert(entries_.end(), other.entries_.begin(), other.entries_.end());
}

Scalar MeanAccumulator::value() const {
    check(!entries_.empty(), "mean metric: empty evaluation set");
    auto sorted = entries_;
    std::sort(sorted.begin(), sorted.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    Scalar sum = 0;
    std::int64_t count = 0;
    for (const auto& [id, sc] : sorted) {
        sum += sc.first;
        count += sc.second;
    }
    check(count > 0, "mean metric: zero element count");
    return sum / static_cast<Scalar>(count);
}

FMeasureAccumulator::FMeasureAccumulator(int n_thresholds) {
    check(n_thresholds >= 1, "f-measure: need at least one threshold");
    tp_.assign(static_cast<std::size_t>(n_thresholds), 0);
    fp_.assign(static_cast<std::size_t>(n_thresholds), 0);
    fn_.assign(static_cast<std::size_t>(n_thresholds), 0);
}

Scalar FMeasureAccumulator::threshold(int j) const {
    return static_cast<Scalar>(j) / static_cast<Scalar>(tp_.size());
}

void FMeasureAccumulator::add(const Tensor& prob, const IntTensor& label) {
    check(prob.numel() == label.numel(), "f-measure: shape mismatch");
    const std::int64_t n = prob.numel();
    const int n_thr = static_cast<int>(tp_.size());
    for (std::int64_t i = 0; i < n; ++i) {
        const Scalar p = prob.data()[i];
        check(p >= 0 && p <= 1, "f-measure: probability out of [0,1]");
        const bool pos = label.data[static_cast<std::size_t>(i)] != 0;
        if (pos) ++positives_;
        for (int j = 0; j < n_thr; ++j) {
            const bool predicted = p >= threshold(j);
            if (predicted && pos) ++tp_[static_cast<std::size_t>(j)];
            else if (predicted) ++fp_[static_cast<std::size_t>(j)];
            else if (pos) ++fn_[static_cast<std::size_t>(j)];
        }
    }
    seen_ += n;
}

void FMeasureAccumulator::merge(const FMeasureAccumulator& other) {
    check(tp_.size() == other.tp_.size(), "f-measure merge: threshold count mismatch");
    for (std::size_t j = 0; j < tp_.size(); ++j) {
        tp_[j] += other.tp_[j];
        fp_[j] += other.fp_[j];
        fn_[j] += other.fn_[j];
    }
    positives_ += other.positives_;
    seen_ += other.seen_;
}

Scalar FMeasureAccumulator::max_f() const {
    check(seen_ > 0, "f-measure: empty evaluation set");
    check(positives_ > 0, "f-measure: labels contain no positive pixels");
    Scalar best = 0;
    for (std::size_t j = 0; j < tp_.size(); ++j) {
        const std::int64_t tp = tp_[j];
        const std::int64_t denom = 2 * tp + fp_[j] + fn_[j];
        const Scalar f = denom == 0 ? Scalar(0) : Scalar(2 * tp) / static_cast<Scalar>(denom);
        best = std::max(best, f);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Metric entry points
// ---------------------------------------------------------------------------

Scalar miou(const IntTensor& pred_classes, const IntTensor& labels, int n_classes) {
    MIoUAccumulator acc(n_classes);
    acc.add(pred_classes, labels);
    return acc.value();
}

namespace {

// Per-sample angle sum over pixels, fields renormalized with an eps floor.
std::pair<Scalar, std::int64_t> angle_sum(const Tensor& pred, const Tensor& label, int b) {
    const int C = pred.dim(1), H = pred.dim(2), W = pred.dim(3);
    check(C == 3, "mean_angular_error: normal fields must have 3 channels");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const Scalar eps = 1e-8;
    const Scalar* pp = pred.data() + static_cast<std::int64_t>(b) * 3 * hw;
    const Scalar* pl = label.data() + static_cast<std::int64_t>(b) * 3 * hw;
    Scalar sum = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
        const Scalar px = pp[i], py = pp[hw + i], pz = pp[2 * hw + i];
        const Scalar lx = pl[i], ly = pl[hw + i], lz = pl[2 * hw + i];
        const Scalar np = std::max(std::sqrt(px * px + py * py + pz * pz), eps);
        const Scalar nl = std::max(std::sqrt(lx * lx + ly * ly + lz * lz), eps);
        Scalar dot = (px * lx + py * ly + pz * lz) / (np * nl);
        dot = std::clamp(dot, Scalar(-1), Scalar(1));
        sum += std::acos(dot) * Scalar(180.0 / M_PI);
    }
    return {sum, hw};
}

}  // namespace

Scalar mean_angular_error(const Tensor& pred_normals, const Tensor& label_normals) {
    check(pred_normals.shape() == label_normals.shape(), "mean_angular_error: shape mismatch");
    check(pred_normals.ndim() == 4, "mean_angular_error: expected [B,3,H,W]");
    MeanAccumulator acc;
    for (int b = 0; b < pred_normals.dim(0); ++b) {
        const auto [sum, count] = angle_sum(pred_normals, label_normals, b);
        acc.add(b, sum, count);
    }
    return acc.value();
}

Scalar abs_err(const Tensor& pred_depth, const Tensor& label_depth) {
    check(pred_depth.shape() == label_depth.shape(), "abs_err: shape mismatch");
    check(pred_depth.ndim() >= 1, "abs_err: scalar input");
    MeanAccumulator acc;
    const int B = pred_depth.dim(0);
    const std::int64_t per = pred_depth.numel() / B;
    for (int b = 0; b < B; ++b) {
        const Scalar* pp = pred_depth.data() + b * per;
        const Scalar* pl = label_depth.data() + b * per;
        Scalar sum = 0;
        for (std::int64_t i = 0; i < per; ++i) sum += std::abs(pp[i] - pl[i]);
        acc.add(b, sum, per);
    }
    return acc.value();
}

Scalar max_f_measure(const Tensor& pred_prob, const IntTensor& binary_labels) {
    FMeasureAccumulator acc;
    acc.add(pred_prob, binary_labels);
    return acc.max_f();
}

Scalar ods_f_measure(const Tensor& pred_boundary_prob, const IntTensor& boundary_labels) {
    FMeasureAccumulator acc;
    acc.add(pred_boundary_prob, boundary_labels);
    return acc.max_f();
}

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

std::string metric_name_for(const TaskDescriptor& task) {
    if (task.name == "segmentation") return "mIoU";
    if (task.name == "depth") return "absErr";
    if (task.name == "normal") return "mErr";
    if (task.name == "saliency") return "maxF";
    if (task.name == "boundary") return "odsF";
    return task.kind == TaskKind::Categorical ? "mIoU" : "absErr";
}

bool metric_higher_better(const std::string& metric) {
    return metric == "mIoU" || metric == "maxF" || metric == "odsF";
}

RunComparison compare_runs(const MetricReport& a, const MetricReport& b) {
    check(a.rows.size() == b.rows.size(), "compare_runs: reports have different row counts");
    RunComparison cmp;
    Scalar rank_a = 0, rank_b = 0;
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        const MetricValue& ra = a.rows[i];
        const MetricValue& rb = b.rows[i];
        check(ra.task == rb.task && ra.metric == rb.metric,
              "compare_runs: task/metric mismatch at row " + std::to_string(i));
        RunComparison::Row row;
        row.task = ra.task;
        row.metric = ra.metric;
        row.value_a = ra.value;
        row.value_b = rb.value;
        row.higher_better = metric_higher_better(ra.metric);
        row.delta = row.higher_better ? rb.value - ra.value : ra.value - rb.value;
        if (row.delta > 0) {
            rank_a += 2;
            rank_b += 1;
        } else if (row.delta < 0) {
            rank_a += 1;
            rank_b += 2;
        } else {
            rank_a += 1.5;
            rank_b += 1.5;
        }
        cmp.rows.push_back(std::move(row));
    }
    cmp.mean_rank_a = rank_a / static_cast<Scalar>(cmp.rows.size());
    cmp.mean_rank_b = rank_b / static_cast<Scalar>(cmp.rows.size());
    return cmp;
}

void RunComparison::save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write comparison: " + path);
    f << "task,metric,value_a,value_b,delta,direction\n";
    f.precision(10);
    for (const Row& r : rows) {
        f << r.task << ',' << r.metric << ',' << r.value_a << ',' << r.value_b << ',' << r.delta
          << ',' << (r.higher_better ? "up" : "down") << '\n';
    }
    f << "mean_rank,,"
      << mean_rank_a << ',' << mean_rank_b << ',' << (mean_rank_b < mean_rank_a ? 1 : 0)
      << ",rank\n";
    if (!f) throw IoError("comparison write failed: " + path);
}

}  // namespace pmtl
