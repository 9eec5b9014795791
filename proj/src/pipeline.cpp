#include "memreg/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <ostream>
#include <span>
#include <utility>

#include "memreg/losses.hpp"
#include "memreg/metrics.hpp"
#include "memreg/optim.hpp"

namespace memreg {

namespace {

// Stream tags carving independent RNG lanes out of one run seed.
constexpr std::uint64_t kTagSegInit = 101;
constexpr std::uint64_t kTagDiscPrimary = 102;
constexpr std::uint64_t kTagDiscAux = 103;
constexpr std::uint64_t kTagSourceShuffle = 104;
constexpr std::uint64_t kTagTargetShuffle = 105;
constexpr std::uint64_t kTagStage2Shuffle = 107;
constexpr std::uint64_t kTagStage2Model = 108;

TensorF avg(const std::vector<TensorF>& terms) {
  TensorF acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return mul_scalar(acc, static_cast<float>(1.0 / static_cast<double>(terms.size())));
}

TensorF avg_or_zero(const std::vector<TensorF>& terms) {
  return terms.empty() ? TensorF::scalar(0.0f) : avg(terms);
}

void check_finite(const IterTrace& t, std::size_t iter) {
  const double vals[] = {t.seg_primary, t.seg_aux, t.adv_g_primary, t.adv_g_aux, t.mr, t.disc};
  for (double v : vals) {
    if (!std::isfinite(v)) {
      char buf[256];
      std::snprintf(buf, sizeof(buf),
                    "non-finite loss at iteration %zu: seg_primary=%g seg_aux=%g "
                    "adv_g_primary=%g adv_g_aux=%g mr=%g disc=%g",
                    iter + 1, t.seg_primary, t.seg_aux, t.adv_g_primary, t.adv_g_aux, t.mr,
                    t.disc);
      throw PipelineError(buf);
    }
  }
}

std::vector<std::pair<std::string, TensorF>> prefixed_params(Discriminator& d,
                                                             const std::string& prefix) {
  std::vector<std::pair<std::string, TensorF>> out;
  for (auto& [name, t] : d.named_parameters()) out.emplace_back(prefix + name, t);
  return out;
}

void check_domain(const TrainConfig& cfg, const DomainSpec& spec, const char* which) {
  if (spec.num_classes != cfg.num_classes)
    throw ConfigError(std::string(which) + " domain has " + std::to_string(spec.num_classes) +
                      " classes but the config expects " + std::to_string(cfg.num_classes));
  if (spec.height != cfg.image_size || spec.width != cfg.image_size)
    throw ConfigError(std::string(which) + " domain is " + std::to_string(spec.height) + "x" +
                      std::to_string(spec.width) + " but the config expects " +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
}

void fill_eval(IterTrace& rec, const RunMetrics& m) {
  rec.has_eval = true;
  rec.aux_miou = m.aux_miou;
  rec.primary_miou = m.primary_miou;
  rec.fused_miou = m.fused_miou;
  rec.disagreement_rate = m.disagreement_rate;
}

void log_eval(std::ostream* log, const char* stage, std::size_t iter, std::size_t total,
              double lr, const RunMetrics& m, double best) {
  if (!log) return;
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%s iter %zu/%zu lr %.3e fused %.4f (aux %.4f primary %.4f disagree %.4f) "
                "best %.4f",
                stage, iter, total, lr, m.fused_miou, m.aux_miou, m.primary_miou,
                m.disagreement_rate, best);
  *log << buf << '\n';
}

}  // namespace

std::string trace_csv_header() {
  return "iter,lr,seg_primary,seg_aux,adv_g_primary,adv_g_aux,mr,disc,"
         "aux_miou,primary_miou,fused_miou,disagreement_rate";
}

void write_trace_csv(std::ostream& out, const std::vector<IterTrace>& trace) {
  out << trace_csv_header() << '\n';
  char buf[320];
  for (const auto& t : trace) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", t.iter, t.lr,
                  t.seg_primary, t.seg_aux, t.adv_g_primary, t.adv_g_aux, t.mr, t.disc);
    out << buf;
    if (t.has_eval) {
      std::snprintf(buf, sizeof(buf), ",%.9g,%.9g,%.9g,%.9g", t.aux_miou, t.primary_miou,
                    t.fused_miou, t.disagreement_rate);
      out << buf;
    } else {
      out << ",,,,";
    }
    out << '\n';
  }
}

Checkpoint snapshot_models(SegModel& seg, Discriminator* d_primary, Discriminator* d_aux,
                           std::uint64_t config_hash, std::uint64_t iteration) {
  Checkpoint ck;
  ck.config_hash = config_hash;
  ck.iteration = iteration;
  for (auto& [name, t] : seg.named_parameters()) ck.add_tensor("seg." + name, t);
  if (d_primary)
    for (auto& [name, t] : d_primary->named_parameters())
      ck.add_tensor("disc_primary." + name, t);
  if (d_aux)
    for (auto& [name, t] : d_aux->named_parameters()) ck.add_tensor("disc_aux." + name, t);
  return ck;
}

void restore_seg_model(const Checkpoint& ck, SegModel& seg) {
  for (auto& [name, t] : seg.named_parameters()) ck.load_into("seg." + name, t);
}

std::size_t checkpoint_num_classes(const Checkpoint& ck) {
  const auto& [shape, values] = ck.at("seg.primary_head.weight");
  (void)values;
  if (shape.empty()) throw FormatError("primary head record has no shape", 0);
  return shape[0];
}

RunMetrics evaluate_samples(SegModel& model, const std::vector<SegSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  const std::size_t C = model.num_classes();
  ConfusionMatrix cm_aux(C), cm_primary(C), cm_fused(C);
  double disagree_sum = 0.0;
  for (const auto& s : samples) {
    if (!s.has_label) throw std::invalid_argument("evaluate: sample has no labels");
    auto [p_aux, p_primary] = model.forward(s.image, /*train=*/false);
    auto aux_pred = argmax_map(p_aux);
    auto primary_pred = argmax_map(p_primary);
    auto fused_pred = fuse_pseudo_label(p_primary, p_aux);
    cm_aux.add(s.label, aux_pred);
    cm_primary.add(s.label, primary_pred);
    cm_fused.add(s.label, fused_pred);
    disagree_sum += disagreement(aux_pred, primary_pred);
  }
  RunMetrics m;
  m.per_class_iou = cm_fused.per_class_iou();
  m.aux_miou = cm_aux.miou();
  m.primary_miou = cm_primary.miou();
  m.fused_miou = cm_fused.miou();
  m.miou = m.fused_miou;
  // Samples share one resolution, so the mean of per-sample rates is
  // the pooled pixel rate.
  m.disagreement_rate = disagree_sum / static_cast<double>(samples.size());
  return m;
}

RunMetrics evaluate(SegModel& model, const DomainSpec& spec, std::size_t count,
                    std::uint64_t index_base) {
  if (count == 0) throw std::invalid_argument("evaluate: count must be positive");
  std::vector<SegSample> samples;
  samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) samples.push_back(generate(spec, index_base + i));
  return evaluate_samples(model, samples);
}

RunMetrics evaluate(const Checkpoint& ck, const DomainSpec& spec, std::size_t count,
                    std::uint64_t index_base) {
  SegModel model(checkpoint_num_classes(ck), 0);
  restore_seg_model(ck, model);
  return evaluate(model, spec, count, index_base);
}

TrainResult train_stage1(const TrainConfig& cfg, const DomainSpec& source,
                         const DomainSpec& target, std::ostream* log) {
  cfg.validate();
  check_domain(cfg, source, "source");
  check_domain(cfg, target, "target");

  const LossWeights& w = cfg.weights;
  const bool use_adv = cfg.use_target && (w.adv_primary > 0.0 || w.adv_aux > 0.0);
  const bool use_mr = cfg.use_target && w.lambda_mr > 0.0;
  const std::size_t warmup = cfg.mr_warmup_iters();

  SegModel model(cfg.num_classes, Rng::key(cfg.seed, kTagSegInit));
  std::unique_ptr<Discriminator> disc_p, disc_a;
  std::vector<std::pair<std::string, TensorF>> disc_params;
  if (use_adv) {
    disc_p = std::make_unique<Discriminator>(cfg.num_classes, Rng::key(cfg.seed, kTagDiscPrimary));
    disc_a = std::make_unique<Discriminator>(cfg.num_classes, Rng::key(cfg.seed, kTagDiscAux));
    disc_params = prefixed_params(*disc_p, "dp.");
    for (auto& p : prefixed_params(*disc_a, "da.")) disc_params.push_back(std::move(p));
  }

  BatchIterator::Options src_opts;
  src_opts.crop = cfg.crop;
  src_opts.epoch_size = cfg.epoch_size;
  BatchIterator src_iter(source, cfg.batch_size, Rng::key(cfg.seed, kTagSourceShuffle), src_opts);

  std::unique_ptr<BatchIterator> tgt_iter;
  if (cfg.use_target) {
    BatchIterator::Options tgt_opts;
    tgt_opts.crop = cfg.crop;
    tgt_opts.strip_labels = true;  // target supervision is off-limits during training
    tgt_opts.epoch_size = cfg.epoch_size;
    tgt_iter = std::make_unique<BatchIterator>(target, cfg.batch_size,
                                               Rng::key(cfg.seed, kTagTargetShuffle), tgt_opts);
  }

  SgdMomentum<float> sgd(cfg.sgd_momentum);
  Adam<float> adam;
  const std::size_t horizon =
      static_cast<std::size_t>(cfg.lr_total_factor * static_cast<double>(cfg.stage1_iters));
  PolySchedule seg_sched{cfg.seg_lr, horizon};
  PolySchedule disc_sched{cfg.disc_lr, horizon};

  RunMetrics metrics;
  metrics.trace.reserve(cfg.stage1_iters);
  Checkpoint best_ck;
  RunMetrics best_eval;
  double best_fused = -1.0;
  std::size_t best_iter = 0;

  for (std::size_t iter = 0; iter < cfg.stage1_iters; ++iter) {
    const double lr_seg = seg_sched.lr(iter);
    const double lr_disc = disc_sched.lr(iter);

    // --- segmentation / generator step ---
    model.zero_grad();
    std::vector<TensorF> seg_p_terms, seg_a_terms, advg_p_terms, advg_a_terms, mr_terms;
    std::vector<TensorF> src_probs_p, src_probs_a, tgt_probs_p, tgt_probs_a;  // detached, for D

    for (const auto& s : src_iter.next()) {
      auto [p_aux, p_primary] = model.forward(s.image, /*train=*/true);
      seg_p_terms.push_back(seg_ce(p_primary, std::span<const std::uint8_t>(s.label)));
      seg_a_terms.push_back(seg_ce(p_aux, std::span<const std::uint8_t>(s.label)));
      if (use_adv) {
        src_probs_p.push_back(p_primary.detach());
        src_probs_a.push_back(p_aux.detach());
      }
    }
    if (cfg.use_target) {
      for (const auto& t : tgt_iter->next()) {
        auto [p_aux, p_primary] = model.forward(t.image, /*train=*/true);
        if (use_adv) {
          advg_p_terms.push_back(adv_g_loss(disc_p->forward(p_primary)));
          advg_a_terms.push_back(adv_g_loss(disc_a->forward(p_aux)));
          tgt_probs_p.push_back(p_primary.detach());
          tgt_probs_a.push_back(p_aux.detach());
        }
        if (use_mr && iter >= warmup)
          mr_terms.push_back(memory_reg(p_aux, p_primary, cfg.mr_detach));
      }
    }

    TensorF seg_p = avg(seg_p_terms);
    TensorF seg_a = avg(seg_a_terms);
    TensorF advg_p = avg_or_zero(advg_p_terms);
    TensorF advg_a = avg_or_zero(advg_a_terms);
    TensorF mr = avg_or_zero(mr_terms);
    TensorF total = stage1_total(seg_p, seg_a, advg_p, advg_a, mr, w);

    IterTrace rec;
    rec.iter = iter + 1;
    rec.lr = lr_seg;
    rec.seg_primary = seg_p.item();
    rec.seg_aux = seg_a.item();
    rec.adv_g_primary = advg_p.item();
    rec.adv_g_aux = advg_a.item();
    rec.mr = mr.item();

    total.backward();
    auto params = model.named_parameters();
    sgd.step(params, lr_seg);

    // --- discriminator step on detached predictions ---
    if (use_adv) {
      disc_p->zero_grad();
      disc_a->zero_grad();
      std::vector<TensorF> d_p_terms, d_a_terms;
      for (std::size_t b = 0; b < tgt_probs_p.size(); ++b) {
        d_p_terms.push_back(
            adv_d_loss(disc_p->forward(src_probs_p[b]), disc_p->forward(tgt_probs_p[b])));
        d_a_terms.push_back(
            adv_d_loss(disc_a->forward(src_probs_a[b]), disc_a->forward(tgt_probs_a[b])));
      }
      TensorF d_total = add(avg(d_p_terms), avg(d_a_terms));
      rec.disc = d_total.item();
      d_total.backward();
      adam.step(disc_params, lr_disc);
    }

    check_finite(rec, iter);

    const bool last = iter + 1 == cfg.stage1_iters;
    if ((iter + 1) % cfg.eval_every == 0 || last) {
      RunMetrics hold = evaluate(model, target, cfg.holdout_count, kHoldoutIndexBase);
      fill_eval(rec, hold);
      if (hold.fused_miou > best_fused) {
        best_fused = hold.fused_miou;
        best_iter = iter + 1;
        best_eval = hold;
        best_ck = snapshot_models(model, disc_p.get(), disc_a.get(), cfg.hash(), iter + 1);
      }
      log_eval(log, "stage1", iter + 1, cfg.stage1_iters, lr_seg, hold, best_fused);
    }
    metrics.trace.push_back(rec);
  }

  metrics.per_class_iou = best_eval.per_class_iou;
  metrics.miou = best_eval.miou;
  metrics.aux_miou = best_eval.aux_miou;
  metrics.primary_miou = best_eval.primary_miou;
  metrics.fused_miou = best_eval.fused_miou;
  metrics.disagreement_rate = best_eval.disagreement_rate;
  metrics.best_iter = best_iter;
  metrics.source_draws = src_iter.draws();
  metrics.target_draws = tgt_iter ? tgt_iter->draws() : 0;
  return {std::move(best_ck), std::move(metrics)};
}

PseudoLabelSet generate_pseudo_labels(const Checkpoint& ck, const DomainSpec& target,
                                      std::size_t count) {
  if (count == 0) throw std::invalid_argument("generate_pseudo_labels: count must be positive");
  const std::size_t C = checkpoint_num_classes(ck);
  if (C != target.num_classes)
    throw ConfigError("checkpoint has " + std::to_string(C) + " classes but the domain has " +
                      std::to_string(target.num_classes));
  SegModel model(C, 0);
  restore_seg_model(ck, model);

  std::vector<std::vector<std::uint8_t>> maps;
  maps.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SegSample s = generate(target, i);
    auto [p_aux, p_primary] = model.forward(s.image, /*train=*/false);
    maps.push_back(fuse_pseudo_label(p_primary, p_aux));
  }

  PseudoLabelSet set;
  set.height = target.height;
  set.width = target.width;
  set.num_classes = C;
  set.weights = class_balance_weights(maps, C);
  set.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) set.labels.emplace_back(i, std::move(maps[i]));
  return set;
}

TrainResult train_stage2(const TrainConfig& cfg, const Checkpoint& stage1,
                         const DomainSpec& target, const PseudoLabelSet& pseudo,
                         std::ostream* log) {
  cfg.validate();
  check_domain(cfg, target, "target");
  if (checkpoint_num_classes(stage1) != cfg.num_classes)
    throw ConfigError("stage-1 checkpoint has " +
                      std::to_string(checkpoint_num_classes(stage1)) +
                      " classes but the config expects " + std::to_string(cfg.num_classes));
  if (pseudo.num_classes != cfg.num_classes)
    throw ConfigError("pseudo-label set has " + std::to_string(pseudo.num_classes) +
                      " classes but the config expects " + std::to_string(cfg.num_classes));
  if (pseudo.labels.empty()) throw ConfigError("pseudo-label set is empty");

  const LossWeights& w = cfg.weights;
  const bool use_mr = w.lambda_mr > 0.0;

  SegModel model(cfg.num_classes, Rng::key(cfg.seed, kTagStage2Model));
  restore_seg_model(stage1, model);

  BatchIterator::Options opts;
  opts.crop = cfg.crop;
  opts.epoch_size = pseudo.labels.size();  // the pseudo set defines the training pool
  opts.overlay = &pseudo;
  BatchIterator tgt_iter(target, cfg.batch_size, Rng::key(cfg.seed, kTagStage2Shuffle), opts);

  SgdMomentum<float> sgd(cfg.sgd_momentum);
  const std::size_t horizon =
      static_cast<std::size_t>(cfg.lr_total_factor * static_cast<double>(cfg.stage2_iters));
  PolySchedule sched{cfg.seg_lr, horizon};

  RunMetrics metrics;
  metrics.trace.reserve(cfg.stage2_iters);
  Checkpoint best_ck;
  RunMetrics best_eval;
  double best_fused = -1.0;
  std::size_t best_iter = 0;

  for (std::size_t iter = 0; iter < cfg.stage2_iters; ++iter) {
    const double lr = sched.lr(iter);
    model.zero_grad();
    std::vector<TensorF> pseg_p_terms, pseg_a_terms, mr_terms;
    for (const auto& s : tgt_iter.next()) {
      auto [p_aux, p_primary] = model.forward(s.image, /*train=*/true);
      pseg_p_terms.push_back(
          seg_ce(p_primary, std::span<const std::uint8_t>(s.label), pseudo.weights));
      pseg_a_terms.push_back(
          seg_ce(p_aux, std::span<const std::uint8_t>(s.label), pseudo.weights));
      if (use_mr) mr_terms.push_back(memory_reg(p_aux, p_primary, cfg.mr_detach));
    }
    TensorF pseg_p = avg(pseg_p_terms);
    TensorF pseg_a = avg(pseg_a_terms);
    TensorF mr = avg_or_zero(mr_terms);
    TensorF total = stage2_total(pseg_p, pseg_a, mr, w);

    IterTrace rec;
    rec.iter = iter + 1;
    rec.lr = lr;
    rec.seg_primary = pseg_p.item();
    rec.seg_aux = pseg_a.item();
    rec.mr = mr.item();
    check_finite(rec, iter);

    total.backward();
    auto params = model.named_parameters();
    sgd.step(params, lr);

    const bool last = iter + 1 == cfg.stage2_iters;
    if ((iter + 1) % cfg.eval_every == 0 || last) {
      RunMetrics hold = evaluate(model, target, cfg.holdout_count, kHoldoutIndexBase);
      fill_eval(rec, hold);
      if (hold.fused_miou > best_fused) {
        best_fused = hold.fused_miou;
        best_iter = iter + 1;
        best_eval = hold;
        best_ck = snapshot_models(model, nullptr, nullptr, cfg.hash(), iter + 1);
      }
      log_eval(log, "stage2", iter + 1, cfg.stage2_iters, lr, hold, best_fused);
    }
    metrics.trace.push_back(rec);
  }

  metrics.per_class_iou = best_eval.per_class_iou;
  metrics.miou = best_eval.miou;
  metrics.aux_miou = best_eval.aux_miou;
  metrics.primary_miou = best_eval.primary_miou;
  metrics.fused_miou = best_eval.fused_miou;
  metrics.disagreement_rate = best_eval.disagreement_rate;
  metrics.best_iter = best_iter;
  metrics.source_draws = 0;  // no source iterator exists in this stage
  metrics.target_draws = tgt_iter.draws();
  return {std::move(best_ck), std::move(metrics)};
}

}  // namespace memreg
