#include "pmtl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include "pmtl/checkpoint.hpp"

namespace pmtl {

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

void TrainConfig::apply_paper_scale_preset() {
    lr = 2e-5;
    epochs = 100;
    batch_size = 6;
    codebook_slots = 4096;
    prototype_dim = 1024;
}

namespace {

std::string bool_str(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("config: bad boolean for " + key + ": " + v);
}

}  // namespace

std::string TrainConfig::serialize() const {
    std::ostringstream os;
    os.precision(17);
    os << "lambda1 = " << lambda1 << '\n';
    os << "lambda2 = " << lambda2 << '\n';
    os << "lr = " << lr << '\n';
    os << "epochs = " << epochs << '\n';
    os << "batch_size = " << batch_size << '\n';
    os << "seed = " << seed << '\n';
    os << "alpha = " << alpha << '\n';
    os << "temperature = " << temperature << '\n';
    os << "codebook_slots = " << codebook_slots << '\n';
    os << "prototype_dim = " << prototype_dim << '\n';
    os << "feature_channels = " << feature_channels << '\n';
    os << "retrieval_depth = " << retrieval_depth << '\n';
    os << "n_heads = " << n_heads << '\n';
    os << "commitment_beta = " << commitment_beta << '\n';
    os << "use_vq = " << bool_str(use_vq) << '\n';
    os << "use_retrieval = " << bool_str(use_retrieval) << '\n';
    os << "use_tke = " << bool_str(use_tke) << '\n';
    os << "use_tc = " << bool_str(use_tc) << '\n';
    os << "tc_literal_sign = " << bool_str(tc_literal_sign) << '\n';
    os << "freeze_prototype_at_eval = " << bool_str(freeze_prototype_at_eval) << '\n';
    os << "adam_beta1 = " << adam_beta1 << '\n';
    os << "adam_beta2 = " << adam_beta2 << '\n';
    os << "adam_eps = " << adam_eps << '\n';
    os << "eval_every = " << eval_every << '\n';
    return os.str();
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("config: malformed line: " + line);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "preset") {
            if (val == "paper-scale") cfg.apply_paper_scale_preset();
            else if (val != "desk") throw ValidationError("config: unknown preset " + val);
        } else if (key == "lambda1") cfg.lambda1 = std::stod(val);
        else if (key == "lambda2") cfg.lambda2 = std::stod(val);
        else if (key == "lr") cfg.lr = std::stod(val);
        else if (key == "epochs") cfg.epochs = std::stoi(val);
        else if (key == "batch_size") cfg.batch_size = std::stoi(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "alpha") cfg.alpha = std::stod(val);
        else if (key == "temperature") cfg.temperature = std::stod(val);
        else if (key == "codebook_slots") cfg.codebook_slots = std::stoi(val);
        else if (key == "prototype_dim") cfg.prototype_dim = std::stoi(val);
        else if (key == "feature_channels") cfg.feature_channels = std::stoi(val);
        else if (key == "retrieval_depth") cfg.retrieval_depth = std::stoi(val);
        else if (key == "n_heads") cfg.n_heads = std::stoi(val);
        else if (key == "commitment_beta") cfg.commitment_beta = std::stod(val);
        else if (key == "use_vq") cfg.use_vq = parse_bool(val, key);
        else if (key == "use_retrieval") cfg.use_retrieval = parse_bool(val, key);
        else if (key == "use_tke") cfg.use_tke = parse_bool(val, key);
        else if (key == "use_tc") cfg.use_tc = parse_bool(val, key);
        else if (key == "tc_literal_sign") cfg.tc_literal_sign = parse_bool(val, key);
        else if (key == "freeze_prototype_at_eval")
            cfg.freeze_prototype_at_eval = parse_bool(val, key);
        else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(val);
        else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(val);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(val);
        else if (key == "eval_every") cfg.eval_every = std::stoi(val);
        else throw ValidationError("config: unknown key " + key);
    }
    check(cfg.lambda1 >= 0 && cfg.lambda2 >= 0, "config: lambdas must be nonnegative");
    check(cfg.batch_size >= 1, "config: batch_size must be >= 1");
    check(cfg.epochs >= 0, "config: negative epochs");
    check(cfg.codebook_slots >= 1 && cfg.prototype_dim >= 1 && cfg.feature_channels >= 1 &&
              cfg.retrieval_depth >= 1 && cfg.n_heads >= 1,
          "config: all dimensions must be positive");
    check(cfg.temperature > 0, "config: temperature must be positive");
    check(cfg.eval_every >= 1, "config: eval_every must be >= 1");
    return cfg;
}

TrainConfig TrainConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(text);
}

void TrainConfig::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write config: " + path);
    f << serialize();
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

SupervisedLoss supervised_loss(const std::vector<Tensor>& predictions,
                               const PartialLabelBatch& batch) {
    check(predictions.size() == batch.labels.size(),
          "supervised_loss: prediction/task count mismatch");
    SupervisedLoss out;
    out.per_task.assign(predictions.size(), 0);
    std::vector<Tensor> terms;
    for (std::size_t t = 0; t < predictions.size(); ++t) {
        const TaskLabels& tl = batch.labels[t];
        int labeled = 0;
        for (std::uint8_t m : tl.present) labeled += m != 0;
        if (labeled == 0) continue;  // unlabeled task contributes zero
        Tensor term;
        if (tl.task.kind == TaskKind::Categorical) {
            term = cross_entropy_masked(predictions[t], tl.class_map, tl.present);
        } else {
            term = l1_loss_masked(predictions[t], tl.values, tl.present);
        }
        out.per_task[t] = term.item();
        terms.push_back(std::move(term));
    }
    check(!terms.empty(), "supervised_loss: batch has no labeled task at all");
    out.value = weighted_sum(terms, std::vector<Scalar>(terms.size(), 1.0));
    return out;
}

Tensor total_loss(const Tensor& mtl, const Tensor& tae, const Tensor& akg, Scalar lambda1,
                  Scalar lambda2) {
    check(std::isfinite(mtl.item()) && std::isfinite(tae.item()) && std::isfinite(akg.item()),
          "total_loss: non-finite component");
    return weighted_sum({mtl, tae, akg}, {1.0, lambda1, lambda2});
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model::Model(const TrainConfig& cfg, const std::vector<TaskDescriptor>& tasks, int label_h,
             int label_w, Rng& rng)
    : cfg_(cfg), tasks_(tasks), label_h_(label_h), label_w_(label_w) {
    check(!tasks.empty(), "model: empty task list");
    const int c = cfg.feature_channels;
    const int d = cfg.prototype_dim;
    Rng enc_rng = rng.fork(1);
    encoder = Encoder(3, c, enc_rng);
    Rng cb_rng = rng.fork(2);
    codebook = Codebook(cfg.codebook_slots, c, cb_rng);
    Rng rec_rng = rng.fork(3);
    recon = ReconDecoder(c, rec_rng);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        Rng dec_rng = rng.fork(100 + t);
        decoders.emplace_back(c, dec_rng);
    }
    Rng proj_rng = rng.fork(4);
    projector = TokenProjector(c, d, proj_rng);
    Rng proto_rng = rng.fork(5);
    prototypes = PrototypeBank(static_cast<int>(tasks.size()), d, proto_rng);
    Rng retr_rng = rng.fork(6);
    retriever = KnowledgeRetriever(cfg.retrieval_depth, d, cfg.n_heads, retr_rng);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        Rng head_rng = rng.fork(200 + t);
        heads.emplace_back(d, head_channels(tasks[t]), label_h, label_w, head_rng);
    }
}

void Model::visit(const ParamVisitor& v) {
    encoder.visit("encoder", v);
    codebook.visit("codebook", v);
    recon.visit("recon", v);
    for (std::size_t t = 0; t < decoders.size(); ++t) {
        decoders[t].visit("decoder" + std::to_string(t), v);
    }
    projector.visit("projector", v);
    prototypes.visit("prototype", v);
    retriever.visit("retriever", v);
    for (std::size_t t = 0; t < heads.size(); ++t) {
        heads[t].visit("head" + std::to_string(t), v);
    }
}

ForwardOutputs Model::forward(const PartialLabelBatch& batch, bool training, bool with_losses) {
    ForwardOutputs out;
    const int h = batch.images.dim(2) / Encoder::downsample_factor;
    const int w = batch.images.dim(3) / Encoder::downsample_factor;
    const int T = task_count();

    Tensor fe = encoder.forward(batch.images, training);
    Tensor fi = fe;
    Tensor aux;
    IntTensor vq_idx;
    if (cfg_.use_vq) {
        QuantizeResult qr = quantize(fe, codebook);
        fi = integrate(fe, qr.quantized);
        vq_idx = std::move(qr.indices);
        out.parts.dead_slots = count_dead_slots(codebook, vq_idx);
        if (with_losses) aux = quantization_aux_loss(fe, codebook, vq_idx, cfg_.commitment_beta);
    }

    Tensor l_tae;
    if (cfg_.use_vq && with_losses) {
        Tensor recon_img = recon.forward(fi);
        l_tae = tae_loss(recon_img, batch.images);
    }

    const bool need_affinity = cfg_.use_retrieval || (with_losses && cfg_.use_tke);
    const bool need_tc = with_losses && cfg_.use_tc && T >= 2;

    std::vector<Tensor> all_tokens;
    std::vector<Tensor> nll_sums;
    std::int64_t tke_pairs = 0;
    out.predictions.reserve(static_cast<std::size_t>(T));

    for (int t = 0; t < T; ++t) {
        Tensor ft = decoders[static_cast<std::size_t>(t)].forward(fi);
        Tensor tokens = projector.forward(ft);
        Tensor stream = tokens;
        if (need_affinity) {
            Tensor sim = task_similarity(tokens, prototypes);
            Tensor affinity = task_affinity(sim, cfg_.temperature);
            out.affinities.push_back(affinity);
            if (with_losses && cfg_.use_tke) {
                const auto& mask = batch.labels[static_cast<std::size_t>(t)].present;
                std::int64_t labeled = 0;
                for (std::uint8_t m : mask) labeled += m != 0;
                if (labeled > 0) {
                    nll_sums.push_back(masked_nll_sum(affinity, t, mask));
                    tke_pairs += labeled;
                }
            }
            if (cfg_.use_retrieval) {
                Tensor fta = affinity_feature(affinity, prototypes);
                stream = retriever.forward(tokens, fta);
            }
        }
        if (need_tc) all_tokens.push_back(tokens);
        Tensor ftr = from_tokens(stream, h, w);
        out.predictions.push_back(heads[static_cast<std::size_t>(t)].forward(ftr));
    }

    if (!with_losses) return out;

    SupervisedLoss sup = supervised_loss(out.predictions, batch);
    out.parts.per_task = sup.per_task;
    out.parts.mtl = sup.value.item();

    Tensor l_tke;
    if (cfg_.use_tke) {
        if (tke_pairs > 0) {
            const Scalar inv = Scalar(1) /
                               static_cast<Scalar>(tke_pairs * static_cast<std::int64_t>(h) * w);
            l_tke = weighted_sum(nll_sums, std::vector<Scalar>(nll_sums.size(), inv));
        } else {
            out.parts.tke_skipped = true;
        }
    }
    Tensor l_tc;
    if (need_tc) l_tc = tc_loss(all_tokens, cfg_.alpha, cfg_.tc_literal_sign);

    std::vector<Tensor> terms{sup.value};
    std::vector<Scalar> coeffs{1.0};
    if (l_tae.defined()) {
        terms.push_back(l_tae);
        coeffs.push_back(cfg_.lambda1);
        out.parts.tae = l_tae.item();
    }
    if (l_tke.defined()) {
        terms.push_back(l_tke);
        coeffs.push_back(cfg_.lambda2);
        out.parts.tke = l_tke.item();
    }
    if (l_tc.defined()) {
        terms.push_back(l_tc);
        coeffs.push_back(cfg_.lambda2);
        out.parts.tc = l_tc.item();
    }
    if (aux.defined()) {
        terms.push_back(aux);
        coeffs.push_back(1.0);
        out.parts.vq_aux = aux.item();
    }
    out.parts.akg = out.parts.tke + out.parts.tc;
    out.total = weighted_sum(terms, coeffs);
    out.parts.total = out.total.item();
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(Scalar lr, Scalar beta1, Scalar beta2, Scalar eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamOptimizer::register_params(Model& model) {
    entries_.clear();
    model.visit([this](const std::string& name, Tensor& t, ParamKind kind) {
        if (kind != ParamKind::Param) return;
        Entry e;
        e.name = name;
        e.param = t;
        e.m.assign(static_cast<std::size_t>(t.numel()), 0);
        e.v.assign(static_cast<std::size_t>(t.numel()), 0);
        entries_.push_back(std::move(e));
    });
}

void AdamOptimizer::zero_grad() {
    for (Entry& e : entries_) e.param.zero_grad();
}

void AdamOptimizer::step() {
    ++t_;
    const Scalar bc1 = 1 - std::pow(b1_, static_cast<Scalar>(t_));
    const Scalar bc2 = 1 - std::pow(b2_, static_cast<Scalar>(t_));
    for (Entry& e : entries_) {
        if (e.param.frozen()) continue;
        const std::int64_t n = e.param.numel();
        const bool has_grad = e.param.has_grad();
        const Scalar* g = has_grad ? e.param.grad() : nullptr;
        Scalar* p = e.param.data();
        for (std::int64_t i = 0; i < n; ++i) {
            const Scalar gi = has_grad ? g[i] : Scalar(0);
            auto& m = e.m[static_cast<std::size_t>(i)];
            auto& v = e.v[static_cast<std::size_t>(i)];
            m = b1_ * m + (1 - b1_) * gi;
            v = b2_ * v + (1 - b2_) * gi * gi;
            p[i] -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& cfg, const DatasetManifest& manifest)
    : cfg_(cfg), manifest_(manifest), opt_(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {
    Rng init_rng(cfg.seed);
    model_ = std::make_unique<Model>(cfg, manifest.tasks, manifest.height, manifest.width,
                                     init_rng);
    opt_.register_params(*model_);
    loop_rng_ = init_rng.fork(0x100b);

    // The whole train split is cached in memory; loading is chunked across
    // the PROTO_MTL_THREADS worker cap and reassembled in index order.
    std::vector<int> all(static_cast<std::size_t>(manifest.train_count));
    for (int i = 0; i < manifest.train_count; ++i) all[static_cast<std::size_t>(i)] = i;
    const int workers = std::min(max_threads(), std::max(1, manifest.train_count));
    if (workers <= 1) {
        train_cache_ = load_batch(manifest_, all, Split::Train);
    } else {
        const int chunk = (manifest.train_count + workers - 1) / workers;
        std::vector<std::future<PartialLabelBatch>> futs;
        for (int wi = 0; wi < workers; ++wi) {
            const int lo = wi * chunk;
            const int hi = std::min(manifest.train_count, lo + chunk);
            if (lo >= hi) break;
            std::vector<int> part(all.begin() + lo, all.begin() + hi);
            futs.push_back(std::async(std::launch::async, [this, part] {
                return load_batch(manifest_, part, Split::Train);
            }));
        }
        std::vector<PartialLabelBatch> parts;
        parts.reserve(futs.size());
        for (auto& f : futs) parts.push_back(f.get());
        // Reassemble in index order.
        train_cache_ = PartialLabelBatch();
        train_cache_.images = Tensor({manifest.train_count, 3, manifest.height, manifest.width});
        train_cache_.indices = all;
        for (const TaskDescriptor& t : manifest.tasks) {
            TaskLabels tl;
            tl.task = t;
            if (t.kind == TaskKind::Categorical) {
                tl.class_map = IntTensor({manifest.train_count, manifest.height, manifest.width});
            } else {
                tl.values = Tensor({manifest.train_count, t.channels, manifest.height,
                                    manifest.width});
            }
            tl.present.assign(static_cast<std::size_t>(manifest.train_count), 0);
            train_cache_.labels.push_back(std::move(tl));
        }
        int row = 0;
        for (const PartialLabelBatch& part : parts) {
            const int pb = part.size();
            const std::int64_t img_per = part.images.numel() / pb;
            std::copy_n(part.images.data(), part.images.numel(),
                        train_cache_.images.data() + row * img_per);
            for (std::size_t t = 0; t < part.labels.size(); ++t) {
                const TaskLabels& src = part.labels[t];
                TaskLabels& dst = train_cache_.labels[t];
                if (src.task.kind == TaskKind::Categorical) {
                    const std::int64_t per = src.class_map.numel() / pb;
                    std::copy_n(src.class_map.data.begin(), src.class_map.numel(),
                                dst.class_map.data.begin() + row * per);
                } else {
                    const std::int64_t per = src.values.numel() / pb;
                    std::copy_n(src.values.data(), src.values.numel(),
                                dst.values.data() + row * per);
                }
                std::copy_n(src.present.begin(), pb, dst.present.begin() + row);
            }
            row += pb;
        }
    }
}

PartialLabelBatch Trainer::gather(const std::vector<int>& rows) const {
    const int B = static_cast<int>(rows.size());
    PartialLabelBatch b;
    b.indices = rows;
    const int H = manifest_.height, W = manifest_.width;
    b.images = Tensor({B, 3, H, W});
    const std::int64_t img_per = static_cast<std::int64_t>(3) * H * W;
    for (int i = 0; i < B; ++i) {
        std::copy_n(train_cache_.images.data() + rows[static_cast<std::size_t>(i)] * img_per,
                    img_per, b.images.data() + i * img_per);
    }
    for (const TaskLabels& src : train_cache_.labels) {
        TaskLabels tl;
        tl.task = src.task;
        tl.present.assign(static_cast<std::size_t>(B), 0);
        if (src.task.kind == TaskKind::Categorical) {
            tl.class_map = IntTensor({B, H, W});
            const std::int64_t per = static_cast<std::int64_t>(H) * W;
            for (int i = 0; i < B; ++i) {
                std::copy_n(src.class_map.data.begin() +
                                rows[static_cast<std::size_t>(i)] * per,
                            per, tl.class_map.data.begin() + i * per);
            }
        } else {
            tl.values = Tensor({B, src.task.channels, H, W});
            const std::int64_t per = static_cast<std::int64_t>(src.task.channels) * H * W;
            for (int i = 0; i < B; ++i) {
                std::copy_n(src.values.data() + rows[static_cast<std::size_t>(i)] * per, per,
                            tl.values.data() + i * per);
            }
        }
        for (int i = 0; i < B; ++i) {
            tl.present[static_cast<std::size_t>(i)] =
                src.present[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
        }
        b.labels.push_back(std::move(tl));
    }
    return b;
}

void Trainer::train_epoch() {
    const int n = manifest_.train_count;
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    loop_rng_.shuffle(order);

    LossBreakdown sums;
    sums.per_task.assign(static_cast<std::size_t>(model_->task_count()), 0);
    int steps = 0;
    std::vector<std::uint8_t> slot_used(static_cast<std::size_t>(cfg_.codebook_slots), 0);

    for (int start = 0; start < n; start += cfg_.batch_size) {
        const int end = std::min(n, start + cfg_.batch_size);
        std::vector<int> rows(order.begin() + start, order.begin() + end);
        PartialLabelBatch batch = gather(rows);
        ForwardOutputs out = model_->forward(batch, true, true);

        if (!std::isfinite(out.parts.total)) {
            opt_.zero_grad();
            if (out.total.defined()) out.total.backward();
            Scalar max_grad = 0;
            bool grad_finite = true;
            model_->visit([&](const std::string&, Tensor& t, ParamKind kind) {
                if (kind != ParamKind::Param || !t.has_grad()) return;
                for (Scalar g : t.grad_vec()) {
                    if (!std::isfinite(g)) grad_finite = false;
                    else max_grad = std::max(max_grad, std::abs(g));
                }
            });
            std::ostringstream os;
            os << "non-finite loss at epoch " << epoch_ << " step " << steps
               << ": total=" << out.parts.total << " mtl=" << out.parts.mtl
               << " tae=" << out.parts.tae << " tke=" << out.parts.tke
               << " tc=" << out.parts.tc << " vq_aux=" << out.parts.vq_aux
               << " max|grad|=" << max_grad
               << (grad_finite ? "" : " (plus non-finite gradient entries)");
            throw TrainingAborted(os.str());
        }

        opt_.zero_grad();
        out.total.backward();
        opt_.step();

        sums.total += out.parts.total;
        sums.mtl += out.parts.mtl;
        sums.tae += out.parts.tae;
        sums.tke += out.parts.tke;
        sums.tc += out.parts.tc;
        sums.akg += out.parts.akg;
        sums.vq_aux += out.parts.vq_aux;
        for (std::size_t t = 0; t < sums.per_task.size(); ++t) {
            sums.per_task[t] += out.parts.per_task[t];
        }
        ++steps;
    }

    EpochStats st;
    st.epoch = epoch_ + 1;
    st.means = sums;
    if (steps > 0) {
        const Scalar inv = Scalar(1) / steps;
        st.means.total *= inv;
        st.means.mtl *= inv;
        st.means.tae *= inv;
        st.means.tke *= inv;
        st.means.tc *= inv;
        st.means.akg *= inv;
        st.means.vq_aux *= inv;
        for (Scalar& v : st.means.per_task) v *= inv;
    }
    log_.push_back(std::move(st));
}

void Trainer::run() {
    while (epoch_ < cfg_.epochs) {
        train_epoch();
        ++epoch_;
        EpochStats& st = log_.back();
        if (manifest_.test_count > 0 &&
            (epoch_ % cfg_.eval_every == 0 || epoch_ == cfg_.epochs)) {
            MetricReport rep = evaluate(Split::Test);
            for (const MetricValue& r : rep.rows) {
                st.eval_metrics.emplace_back(r.task + "/" + r.metric, r.value);
            }
        }
    }
}

MetricReport Trainer::evaluate(Split split) {
    const bool was_frozen = model_->prototypes.frozen();
    if (cfg_.freeze_prototype_at_eval) model_->prototypes.set_frozen(true);
    MetricReport rep = evaluate_model(*model_, manifest_, split);
    model_->prototypes.set_frozen(was_frozen);
    return rep;
}

void Trainer::save(const std::string& path) const {
    CheckpointData d;
    d.config_text = cfg_.serialize();
    d.epoch = epoch_;
    d.adam_step = opt_.step_count();
    d.rng_state = loop_rng_.serialize();
    const_cast<Model&>(*model_).visit([&d](const std::string& name, Tensor& t, ParamKind) {
        d.tensors.emplace_back(name, t.detach());
    });
    for (const auto& e : const_cast<AdamOptimizer&>(opt_).entries()) {
        d.adam_state.emplace_back(e.name + ".m", e.m);
        d.adam_state.emplace_back(e.name + ".v", e.v);
    }
    save_checkpoint(d, path);
}

void Trainer::load(const std::string& path) {
    CheckpointData d = load_checkpoint(path);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : d.tensors) by_name[name] = &t;
    model_->visit([&by_name](const std::string& name, Tensor& t, ParamKind) {
        auto it = by_name.find(name);
        check(it != by_name.end(), "checkpoint missing tensor " + name);
        check(it->second->shape() == t.shape(),
              "checkpoint tensor " + name + " has shape " + shape_str(it->second->shape()) +
                  ", model expects " + shape_str(t.shape()));
        std::copy_n(it->second->data(), t.numel(), t.data());
    });
    std::map<std::string, const std::vector<Scalar>*> opt_by_name;
    for (const auto& [name, v] : d.adam_state) opt_by_name[name] = &v;
    for (auto& e : opt_.entries()) {
        auto im = opt_by_name.find(e.name + ".m");
        auto iv = opt_by_name.find(e.name + ".v");
        check(im != opt_by_name.end() && iv != opt_by_name.end(),
              "checkpoint missing optimizer state for " + e.name);
        check(im->second->size() == e.m.size() && iv->second->size() == e.v.size(),
              "checkpoint optimizer state size mismatch for " + e.name);
        e.m = *im->second;
        e.v = *iv->second;
    }
    opt_.set_step_count(d.adam_step);
    loop_rng_.deserialize(d.rng_state);
    epoch_ = static_cast<int>(d.epoch);
}

void Trainer::write_log_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write training log: " + path);
    f << "epoch,total,mtl,tae,tke,tc,akg,vq_aux";
    for (const TaskDescriptor& t : manifest_.tasks) f << ",sup_" << t.name;
    // Eval columns appear as task/metric pairs on epochs where eval ran.
    std::vector<std::string> eval_cols;
    for (const EpochStats& st : log_) {
        for (const auto& [k, v] : st.eval_metrics) {
            if (std::find(eval_cols.begin(), eval_cols.end(), k) == eval_cols.end()) {
                eval_cols.push_back(k);
            }
        }
    }
    for (const std::string& c : eval_cols) f << ',' << c;
    f << '\n';
    f.precision(10);
    for (const EpochStats& st : log_) {
        f << st.epoch << ',' << st.means.total << ',' << st.means.mtl << ',' << st.means.tae
          << ',' << st.means.tke << ',' << st.means.tc << ',' << st.means.akg << ','
          << st.means.vq_aux;
        for (Scalar v : st.means.per_task) f << ',' << v;
        for (const std::string& c : eval_cols) {
            f << ',';
            for (const auto& [k, v] : st.eval_metrics) {
                if (k == c) {
                    f << v;
                    break;
                }
            }
        }
        f << '\n';
    }
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

namespace {

IntTensor argmax_channels(const Tensor& logits, int b) {
    const int C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    IntTensor out({H, W});
    const Scalar* base = logits.data() + static_cast<std::int64_t>(b) * C * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
        int best = 0;
        Scalar best_v = base[p];
        for (int c = 1; c < C; ++c) {
            const Scalar v = base[static_cast<std::int64_t>(c) * hw + p];
            if (v > best_v) {  // ties keep the lowest class id
                best_v = v;
                best = c;
            }
        }
        out.data[static_cast<std::size_t>(p)] = best;
    }
    return out;
}

// Probability of class 1 from binary logits.
Tensor binary_prob(const Tensor& logits, int b) {
    const int H = logits.dim(2), W = logits.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor out({H, W});
    const Scalar* base = logits.data() + static_cast<std::int64_t>(b) * 2 * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
        out.data()[p] = Scalar(1) / (Scalar(1) + std::exp(base[p] - base[hw + p]));
    }
    return out;
}

IntTensor slice_labels(const IntTensor& stack, int b) {
    const int H = stack.shape[1], W = stack.shape[2];
    IntTensor out({H, W});
    const std::int64_t per = static_cast<std::int64_t>(H) * W;
    std::copy_n(stack.data.begin() + b * per, per, out.data.begin());
    return out;
}

}  // namespace

MetricReport evaluate_model(Model& model, const DatasetManifest& manifest, Split split,
                            int batch_size) {
    const int n = manifest.count(split);
    check(n > 0, "evaluate: empty split");
    const int T = model.task_count();

    std::vector<MIoUAccumulator> miou_acc(static_cast<std::size_t>(T));
    std::vector<MeanAccumulator> mean_acc(static_cast<std::size_t>(T));
    std::vector<FMeasureAccumulator> f_acc(static_cast<std::size_t>(T), FMeasureAccumulator(255));
    for (int t = 0; t < T; ++t) {
        if (model.tasks()[static_cast<std::size_t>(t)].kind == TaskKind::Categorical) {
            miou_acc[static_cast<std::size_t>(t)] =
                MIoUAccumulator(model.tasks()[static_cast<std::size_t>(t)].class_count);
        }
    }

    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        std::vector<int> idx;
        for (int i = start; i < end; ++i) idx.push_back(i);
        PartialLabelBatch batch = load_batch(manifest, idx, split);
        ForwardOutputs out = model.forward(batch, false, false);

        for (int t = 0; t < T; ++t) {
            const TaskDescriptor& task = model.tasks()[static_cast<std::size_t>(t)];
            const TaskLabels& tl = batch.labels[static_cast<std::size_t>(t)];
            const std::string metric = metric_name_for(task);
            for (int b = 0; b < batch.size(); ++b) {
                if (!tl.present[static_cast<std::size_t>(b)]) continue;
                const int sample_id = batch.indices[static_cast<std::size_t>(b)];
                if (metric == "mIoU") {
                    miou_acc[static_cast<std::size_t>(t)].add(
                        argmax_channels(out.predictions[static_cast<std::size_t>(t)], b),
                        slice_labels(tl.class_map, b));
                } else if (metric == "maxF" || metric == "odsF") {
                    f_acc[static_cast<std::size_t>(t)].add(
                        binary_prob(out.predictions[static_cast<std::size_t>(t)], b),
                        slice_labels(tl.class_map, b));
                } else if (metric == "absErr") {
                    const Tensor& pred = out.predictions[static_cast<std::size_t>(t)];
                    const std::int64_t per = pred.numel() / batch.size();
                    const Scalar* pp = pred.data() + b * per;
                    const Scalar* pl = tl.values.data() + b * per;
                    Scalar sum = 0;
                    for (std::int64_t i = 0; i < per; ++i) sum += std::abs(pp[i] - pl[i]);
                    mean_acc[static_cast<std::size_t>(t)].add(sample_id, sum, per);
                } else {  // mErr
                    const Tensor& pred = out.predictions[static_cast<std::size_t>(t)];
                    const int H = pred.dim(2), W = pred.dim(3);
                    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
                    const Scalar* pp = pred.data() + static_cast<std::int64_t>(b) * 3 * hw;
                    const Scalar* pl = tl.values.data() + static_cast<std::int64_t>(b) * 3 * hw;
                    const Scalar eps = 1e-8;
                    Scalar sum = 0;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const Scalar np = std::max(
                            std::sqrt(pp[i] * pp[i] + pp[hw + i] * pp[hw + i] +
                                      pp[2 * hw + i] * pp[2 * hw + i]),
                            eps);
                        const Scalar nl = std::max(
                            std::sqrt(pl[i] * pl[i] + pl[hw + i] * pl[hw + i] +
                                      pl[2 * hw + i] * pl[2 * hw + i]),
                            eps);
                        Scalar dot =
                            (pp[i] * pl[i] + pp[hw + i] * pl[hw + i] +
                             pp[2 * hw + i] * pl[2 * hw + i]) /
                            (np * nl);
                        dot = std::clamp(dot, Scalar(-1), Scalar(1));
                        sum += std::acos(dot) * Scalar(180.0 / M_PI);
                    }
                    mean_acc[static_cast<std::size_t>(t)].add(sample_id, sum, hw);
                }
            }
        }
    }

    MetricReport rep;
    rep.protocol = protocol_name(manifest.protocol);
    for (int t = 0; t < T; ++t) {
        const TaskDescriptor& task = model.tasks()[static_cast<std::size_t>(t)];
        const std::string metric = metric_name_for(task);
        MetricValue v;
        v.task = task.name;
        v.metric = metric;
        if (metric == "mIoU") {
            v.value = miou_acc[static_cast<std::size_t>(t)].value();
        } else if (metric == "maxF" || metric == "odsF") {
            v.value = f_acc[static_cast<std::size_t>(t)].max_f();
        } else {
            v.value = mean_acc[static_cast<std::size_t>(t)].value();
        }
        rep.rows.push_back(std::move(v));
    }
    return rep;
}

}  // namespace pmtl
