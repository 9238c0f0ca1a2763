"""Two-stage optimization and the cross-validation driver.

Stage 1 fits the PET generator on PET-complete training subjects,
alternating generator and discriminator steps.  Stage 2 freezes it,
fills in missing PET volumes (generated, or zero-filled in ablation
modes), and trains the modality encoders, fusion head, and classifier
on the focal + alignment objective.  ``run_cv`` wraps both stages in a
stratified k-fold loop with train-split-only standardization.

Everything is seeded through ``numpy.random.SeedSequence`` spawns, so a
(config, seed) pair fully determines every artifact byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, no_grad
from .checkpoint import save_checkpoint, state_checksums
from .encoders import EncoderConfig, ModalityEncoders, pool_tokens
from .fusion import ConcatHead, TcafHead
from .losses import (LossConfig, focal_loss, inverse_class_weights, sdm_loss,
                     total_loss, triple_loss)
from .metrics import threshold_metrics
from .mmg import MmgConfig, MmgModel, hybrid_loss, quantize, discriminator_loss
from .nn import Module
from .synthdata import Standardizer, clinical_matrix


class Instrument:
    """Event recorder for leakage audits: which ids hit which train step."""

    def __init__(self):
        self.events = {}

    def record(self, key, value):
        self.events.setdefault(key, []).append(value)

    def all_ids(self, key):
        out = []
        for batch in self.events.get(key, []):
            out.extend(batch)
        return out


class OptimizerNaNError(RuntimeError):
    """A parameter produced a NaN gradient; training cannot continue."""


class Adam:
    """Bias-corrected Adam over a list of (name, Parameter) pairs."""

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (name, p) in enumerate(self.named_params):
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise OptimizerNaNError(
                    f"NaN gradient in parameter {name!r} at step {self.t}")
            g = g.astype(p.data.dtype, copy=False)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    average_last: int = 10       # stage-2 tail weight averaging window (0 = off)
    seed: int = 0
    k_folds: int = 5
    use_mmg: bool = True
    use_tcaf: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    mmg: MmgConfig = field(default_factory=MmgConfig)
    enc: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self):
        for name in ("epochs_stage1", "epochs_stage2", "batch_size", "k_folds"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.k_folds < 2:
            raise ValueError(f"k_folds must be >= 2, got {self.k_folds}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if int(self.average_last) < 0:
            raise ValueError(f"average_last must be >= 0, got {self.average_last}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValueError(f"seed must be u64, got {self.seed}")
        self.loss.validate()
        self.mmg.validate()
        self.enc.validate()
        return self

    def mode(self):
        return {(False, False): "none", (True, False): "mmg_only",
                (False, True): "tcaf_only", (True, True): "mmg_tcaf"}[
                    (bool(self.use_mmg), bool(self.use_tcaf))]


def _rng(seed_seq):
    return np.random.Generator(np.random.PCG64(seed_seq))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _write_csv(path, header, rows):
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _fmt_row(values):
    return [values[0]] + [f"{v:.6f}" for v in values[1:]]


# -- stage 1 -------------------------------------------------------------------


def train_mmg(subjects, cfg: TrainConfig, *, seed_seq=None, out_dir=None,
              instrument=None, config_hash=""):
    """Fit the PET generator on PET-complete subjects; returns (model, history).

    History rows are per-epoch means: (epoch, l1, qua, per, adv, total).
    """
    cfg.validate()
    complete = [s for s in subjects if s.has_pet]
    if len(complete) < 2:
        raise ValueError(f"stage 1 needs >= 2 PET-complete subjects, got {len(complete)}")
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(cfg.seed)
    ss_init, ss_shuffle, ss_reseed = seed_seq.spawn(3)

    shape = complete[0].mri.shape
    model = MmgModel(_rng(ss_init), cfg.mmg, volume_shape=shape)
    x_all = np.stack([s.mri for s in complete])[:, None]
    y_all = np.stack([s.pet for s in complete])[:, None]
    ids = [s.subject_id for s in complete]

    opt_gen = Adam(model.generator_parameters(), cfg.lr)
    opt_disc = Adam([(n, p) for n, p in model.named_parameters() if n.startswith("disc.")],
                    cfg.lr)
    shuffle_rng = _rng(ss_shuffle)
    reseed_rng = _rng(ss_reseed)

    history = []
    for epoch in range(cfg.epochs_stage1):
        model.codebook.reset_usage()
        sums = np.zeros(5)
        n_batches = 0
        pool = None
        for idx in _batches(len(complete), cfg.batch_size, shuffle_rng):
            if instrument is not None:
                instrument.record("mmg_batch", [ids[i] for i in idx])
            x = Tensor(x_all[idx])
            y_true = Tensor(y_all[idx])

            z_hat = model.encode(x)
            z_q, code_idx = quantize(z_hat, model.codebook)
            model.codebook.record_usage(code_idx)
            y_gen = model.decode(z_q)

            model.disc.set_trainable(False)
            scores_fake = model.disc(y_gen)
            total, comps = hybrid_loss(
                y_true, y_gen, z_hat, z_q, scores_fake, cfg.mmg.weights(),
                beta=cfg.mmg.beta, perceptual_net=model.perceptual,
                codebook=model.codebook, indices=code_idx)
            opt_gen.zero_grad()
            total.backward()
            opt_gen.step()

            model.disc.set_trainable(True)
            s_real = model.disc(y_true)
            s_fake = model.disc(Tensor(y_gen.data))
            d_loss = discriminator_loss(s_real, s_fake)
            opt_disc.zero_grad()
            d_loss.backward()
            opt_disc.step()

            sums += (comps["l1"], comps["qua"], comps["per"], comps["adv"], float(total.data))
            n_batches += 1
            pool = np.moveaxis(z_hat.data, 1, -1).reshape(-1, z_hat.data.shape[1])
        model.codebook.reseed_dead(pool, reseed_rng)
        means = sums / n_batches
        history.append((epoch, *[float(v) for v in means]))

    # Align generated-volume scale with acquired ones on the training set;
    # the affine must be identity while the raw pairs are measured.
    model.calib.affine.data[:] = (0.0, 1.0, 0.0)
    model.calib.fit(y_all, model.generate_pet(x_all))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "stage1_loss.csv"),
                   ["epoch", "l1", "qua", "per", "adv", "total"],
                   [_fmt_row(r) for r in history])
        meta = {
            "stage": 1, "seed": int(cfg.seed), "config_hash": config_hash,
            "codebook_size": cfg.mmg.codebook_size, "d_code": cfg.mmg.d_code,
            "volume_shape": list(shape), "beta": cfg.mmg.beta,
            "loss_weights": {"l1": cfg.mmg.lambda_l1, "qua": cfg.mmg.lambda_qua,
                             "per": cfg.mmg.lambda_per, "adv": cfg.mmg.lambda_adv},
        }
        save_checkpoint(os.path.join(out_dir, "mmg.itck"), model.state_dict(), meta)
    return model, history


# -- stage 2 -------------------------------------------------------------------


class FusionModel(Module):
    """Modality encoders plus either the co-attention head or the
    plain-concat baseline head."""

    def __init__(self, rng, enc_cfg: EncoderConfig, use_tcaf=True):
        self.encoders = ModalityEncoders(rng, enc_cfg)
        self.use_tcaf = use_tcaf
        self.head = TcafHead(rng, enc_cfg) if use_tcaf else ConcatHead(rng, enc_cfg)

    def forward(self, mri, pet, clin):
        f_m, f_p, f_c = self.encoders(mri, pet, clin)
        logits, probs = self.head(f_m, f_p, f_c)
        return logits, probs, (f_m, f_p, f_c)


@dataclass
class FusionBundle:
    """Everything needed to evaluate a trained stage-2 model."""
    model: FusionModel
    standardizer: Standardizer
    loss_cfg: LossConfig
    history: list


def _imputation_noise(mri, shape):
    """Deterministic unit-normal field keyed to the source MRI bytes.

    The same subject always receives the same imputed volume, across runs,
    process layouts, and train/eval assembly."""
    digest = hashlib.sha256(np.ascontiguousarray(mri, dtype=np.float32).tobytes()).digest()
    seed = np.frombuffer(digest[:16], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed.tolist())))
    return rng.standard_normal(shape, dtype=np.float32)


def assemble_pet(subjects, mmg_model=None, instrument=None):
    """[n,1,D,H,W] PET batch: real volumes where present, otherwise
    generated from MRI (or zero-filled when no generator is given).

    Generated volumes are mean predictions and carry less spread than
    acquired ones, so they are noise-matched with the generator's fitted
    residual sd: the fusion encoders then see a single input distribution
    instead of two separable ones."""
    shape = subjects[0].mri.shape
    out = np.zeros((len(subjects), 1) + shape, dtype=np.float32)
    missing_idx = [i for i, s in enumerate(subjects) if not s.has_pet]
    for i, s in enumerate(subjects):
        if s.has_pet:
            out[i, 0] = s.pet
    if missing_idx and mmg_model is not None:
        mri_missing = np.stack([subjects[i].mri for i in missing_idx])[:, None]
        gen = mmg_model.generate_pet(mri_missing)
        resid = mmg_model.calib.residual_sd
        for j, i in enumerate(missing_idx):
            out[i] = gen[j]
            if resid > 0.0:
                out[i, 0] += resid * _imputation_noise(subjects[i].mri, shape)
    if instrument is not None:
        instrument.record("imputed_ids", [subjects[i].subject_id for i in missing_idx])
    return out


def train_fusion(subjects, cfg: TrainConfig, mmg_model=None, *, seed_seq=None,
                 out_dir=None, instrument=None, config_hash=""):
    """Train encoders + fusion + classifier; returns a FusionBundle.

    ``mmg_model`` (frozen) fills missing PET volumes; without it they are
    zero-filled.  History rows: (epoch, total, focal, sdm_mt, sdm_pt, sdm_mp).
    """
    cfg.validate()
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(cfg.seed)
    ss_init, ss_shuffle = seed_seq.spawn(2)

    ids = [s.subject_id for s in subjects]
    labels = np.array([s.label for s in subjects], dtype=np.int64)
    standardizer = Standardizer().fit(clinical_matrix(subjects))
    if instrument is not None:
        instrument.record("standardizer_ids", list(ids))
        if mmg_model is not None:
            instrument.record("mmg_checksums_before", state_checksums(mmg_model.state_dict()))

    x_mri = np.stack([s.mri for s in subjects])[:, None]
    x_pet = assemble_pet(subjects, mmg_model, instrument=instrument)
    x_clin = standardizer.transform(clinical_matrix(subjects))

    model = FusionModel(_rng(ss_init), cfg.enc, use_tcaf=cfg.use_tcaf)
    loss_cfg = cfg.loss
    if loss_cfg.alpha_focal is None:
        loss_cfg = replace(loss_cfg, alpha_focal=inverse_class_weights(labels))
    opt = Adam(model.named_parameters(), cfg.lr)
    shuffle_rng = _rng(ss_shuffle)
    sdm_in_graph = loss_cfg.alpha_total > 0

    history = []
    tail_sums = None
    tail_count = 0
    tail_start = max(cfg.epochs_stage2 - cfg.average_last, 1)
    for epoch in range(cfg.epochs_stage2):
        sums = np.zeros(5)
        n_batches = 0
        for idx in _batches(len(subjects), cfg.batch_size, shuffle_rng):
            if instrument is not None:
                instrument.record("fusion_batch", [ids[i] for i in idx])
            y = labels[idx]
            logits, probs, feats = model(x_mri[idx], x_pet[idx], x_clin[idx])
            l_focal = focal_loss(probs, y, loss_cfg)

            sdm_vals = (0.0, 0.0, 0.0)
            l_total = l_focal
            if len(idx) >= 2:
                if sdm_in_graph:
                    l_mt, l_pt, l_mp = _sdm_terms(feats, y, loss_cfg)
                    l_triple = triple_loss(l_mt, l_pt, l_mp, loss_cfg.lam)
                    l_total = total_loss(l_focal, l_triple, loss_cfg.alpha_total)
                    sdm_vals = (float(l_mt.data), float(l_pt.data), float(l_mp.data))
                else:
                    # reported but kept out of the graph, so the parameter
                    # trajectory matches a run that skips them entirely
                    with no_grad():
                        l_mt, l_pt, l_mp = _sdm_terms(feats, y, loss_cfg)
                    sdm_vals = (float(l_mt.data), float(l_pt.data), float(l_mp.data))

            opt.zero_grad()
            l_total.backward()
            opt.step()
            sums += (float(l_total.data), float(l_focal.data), *sdm_vals)
            n_batches += 1
        means = sums / n_batches
        history.append((epoch, *[float(v) for v in means]))
        # Small-batch training keeps bouncing around the basin it found;
        # the average of the last few epochs' weights sits nearer its
        # center than any single endpoint does.
        if cfg.average_last > 0 and epoch >= tail_start:
            state = model.state_dict()
            if tail_sums is None:
                tail_sums = {k: v.astype(np.float64) for k, v in state.items()}
            else:
                for k, v in state.items():
                    tail_sums[k] += v
            tail_count += 1
    if tail_sums is not None and tail_count > 0:
        model.load_state_dict(
            {k: (v / tail_count).astype(np.float32) for k, v in tail_sums.items()})

    if instrument is not None and mmg_model is not None:
        instrument.record("mmg_checksums_after", state_checksums(mmg_model.state_dict()))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "stage2_loss.csv"),
                   ["epoch", "total", "focal", "sdm_mt", "sdm_pt", "sdm_mp"],
                   [_fmt_row(r) for r in history])
        tensors = model.state_dict()
        tensors["standardizer.mean"] = standardizer.mean.astype(np.float32)
        tensors["standardizer.std"] = standardizer.std.astype(np.float32)
        meta = {
            "stage": 2, "seed": int(cfg.seed), "config_hash": config_hash,
            "use_mmg": bool(cfg.use_mmg), "use_tcaf": bool(cfg.use_tcaf),
            "alpha_focal": [float(a) for a in loss_cfg.alpha_focal],
        }
        save_checkpoint(os.path.join(out_dir, "fusion.itck"), tensors, meta)
    return FusionBundle(model, standardizer, loss_cfg, history)


def _sdm_terms(feats, y, loss_cfg):
    f_m, f_p, f_c = feats
    pm, pp, pc = pool_tokens(f_m), pool_tokens(f_p), pool_tokens(f_c)
    l_mt = sdm_loss(pm, pc, y, loss_cfg)
    l_pt = sdm_loss(pp, pc, y, loss_cfg)
    l_mp = sdm_loss(pm, pp, y, loss_cfg)
    return l_mt, l_pt, l_mp


def evaluate_fusion(bundle: FusionBundle, subjects, mmg_model=None):
    """Threshold and ranking metrics of the trained model on ``subjects``."""
    x_mri = np.stack([s.mri for s in subjects])[:, None]
    x_pet = assemble_pet(subjects, mmg_model)
    x_clin = bundle.standardizer.transform(clinical_matrix(subjects))
    labels = np.array([s.label for s in subjects], dtype=np.int64)
    with no_grad():
        _, probs, _ = bundle.model(x_mri, x_pet, x_clin)
    return threshold_metrics(probs.data[:, 1], labels)


# -- cross-validation ----------------------------------------------------------

METRIC_KEYS = ("acc", "sen", "spe", "auc", "f1")


def run_cv_single_fold(subjects, cfg: TrainConfig, fold_index, out_dir=None,
                       config_hash="", instrument=None):
    """Train and evaluate one fold; the unit of --parallel-folds work.

    Fold membership and per-fold seeds derive only from (cfg, fold_index),
    so any execution order or process layout yields identical rows.
    """
    from .synthdata import split_kfold

    cfg.validate()
    ids = [s.subject_id for s in subjects]
    by_id = {s.subject_id: s for s in subjects}
    labels = [s.label for s in subjects]
    folds = split_kfold(ids, cfg.k_folds, cfg.seed, labels=labels)
    test_ids = folds[fold_index]
    fold_seed = np.random.SeedSequence(cfg.seed).spawn(cfg.k_folds)[fold_index]

    test_set = set(test_ids)
    train_subjects = [s for s in subjects if s.subject_id not in test_set]
    test_subjects = [by_id[t] for t in test_ids]
    ss_mmg, ss_fusion = fold_seed.spawn(2)
    fold_dir = None if out_dir is None else os.path.join(out_dir, f"fold_{fold_index}")

    mmg_model = None
    pre = None
    if cfg.use_mmg:
        mmg_model, _ = train_mmg(
            train_subjects, cfg, seed_seq=ss_mmg, out_dir=fold_dir,
            instrument=instrument, config_hash=config_hash)
        pre = state_checksums(mmg_model.state_dict())
    bundle = train_fusion(
        train_subjects, cfg, mmg_model, seed_seq=ss_fusion, out_dir=fold_dir,
        instrument=instrument, config_hash=config_hash)
    if cfg.use_mmg:
        post = state_checksums(mmg_model.state_dict())
        if pre != post:
            raise RuntimeError(f"fold {fold_index}: stage 2 modified frozen generator weights")
    m = evaluate_fusion(bundle, test_subjects, mmg_model)
    return {"fold": fold_index, "test_size": len(test_subjects),
            **{k: m[k] for k in METRIC_KEYS},
            "counts": {k: m[k] for k in ("tp", "tn", "fp", "fn")}}


def run_cv(subjects, cfg: TrainConfig, *, out_dir=None, instrument=None,
           config_hash=""):
    """Stratified k-fold CV of the two-stage pipeline; returns the report dict.

    Per fold: fit the standardizer and both stages on the train split only,
    then evaluate on the held-out fold.  The aggregate block holds the
    arithmetic mean and population std of each metric across folds.
    """
    cfg.validate()
    fold_rows = [
        run_cv_single_fold(subjects, cfg, i, out_dir=out_dir,
                           config_hash=config_hash, instrument=instrument)
        for i in range(cfg.k_folds)
    ]

    aggregate = {}
    for key in METRIC_KEYS:
        vals = np.array([row[key] for row in fold_rows], dtype=np.float64)
        aggregate[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    report = {
        "mode": cfg.mode(), "k_folds": cfg.k_folds, "seed": int(cfg.seed),
        "config_hash": config_hash, "folds": fold_rows, "aggregate": aggregate,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_report(report, os.path.join(out_dir, f"metrics_{cfg.mode()}.json"))
    return report


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
