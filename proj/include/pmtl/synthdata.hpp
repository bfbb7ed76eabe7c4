#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmtl/tensor.hpp"

namespace pmtl {

enum class TaskKind { Categorical, Regression };

struct TaskDescriptor {
    int id = 0;
    TaskKind kind = TaskKind::Categorical;
    int channels = 1;     // label channels for regression tasks
    int class_count = 0;  // categorical only
    std::string name;
};

enum class LabelProtocol { OneLabel, RandomLabel, Full };

std::string protocol_name(LabelProtocol p);
LabelProtocol protocol_from_name(const std::string& s);

enum class Split { Train, Test };

struct DatasetManifest {
    std::string root;  // directory holding manifest.txt and split subdirs
    int train_count = 0;
    int test_count = 0;
    int height = 0;
    int width = 0;
    std::vector<TaskDescriptor> tasks;
    LabelProtocol protocol = LabelProtocol::OneLabel;
    int max_labels = 1;  // random-label cap
    std::uint64_t seed = 0;
    // Per-sample task-presence masks, [n_samples][T]. Test masks are all-true.
    std::vector<std::vector<std::uint8_t>> train_masks;
    std::vector<std::vector<std::uint8_t>> test_masks;

    int task_count() const { return static_cast<int>(tasks.size()); }
    int count(Split s) const { return s == Split::Train ? train_count : test_count; }
    const std::vector<std::vector<std::uint8_t>>& masks(Split s) const {
        return s == Split::Train ? train_masks : test_masks;
    }

    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);
};

struct GenConfig {
    int n_train = 600;
    int n_test = 200;
    int height = 32;
    int width = 32;
    int n_shapes = 3;  // primitives per scene
    int n_tasks = 3;   // 3: seg/depth/normal; 4: +saliency; 5: +boundary
    int seg_classes = 4;
    LabelProtocol protocol = LabelProtocol::OneLabel;
    int max_labels = 1;
    std::uint64_t seed = 0;
    std::string out_dir;
};

// Per-task labels for a stack of samples. Categorical tasks fill `class_map`,
// regression tasks fill `values`; `present[b]` mirrors the manifest mask.
struct TaskLabels {
    TaskDescriptor task;
    IntTensor class_map;  // [B,H,W]
    Tensor values;        // [B,channels,H,W]
    std::vector<std::uint8_t> present;
};

struct PartialLabelBatch {
    Tensor images;  // [B,3,H,W], values in [0,1]
    std::vector<TaskLabels> labels;
    std::vector<int> indices;  // source sample ids, in batch order
    int size() const { return images.defined() ? images.dim(0) : 0; }
};

// Writes scene images plus mutually consistent segmentation / depth / normal
// (and optional saliency / boundary) labels under cfg.out_dir, then assigns
// masks per cfg.protocol. Same config -> byte-identical files.
DatasetManifest generate_dataset(const GenConfig& cfg);

// Re-rolls the per-sample masks under a new protocol. Pure in (manifest,
// protocol, max_labels, seed); rewrites manifest.txt when persist is true.
DatasetManifest assign_labels(const DatasetManifest& manifest, LabelProtocol protocol,
                              int max_labels, std::uint64_t seed, bool persist = true);

PartialLabelBatch load_batch(const DatasetManifest& manifest, const std::vector<int>& indices,
                             Split split = Split::Train);

}  // namespace pmtl
