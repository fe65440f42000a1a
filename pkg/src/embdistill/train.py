"""Training orchestration: multitask runs, evaluation, sweeps, oracle checks.

A run is a pure function of (config, seed, data): utterance order is drawn
from named streams, batch gradients are accumulated in id-sorted order, and
no artifact contains timestamps, so re-running a config reproduces every
output byte for byte.  Evaluation (checkpoint selection included) uses the
EMA shadow parameters; live-parameter dev error is reported alongside.
"""

import csv
import glob
import json
import os
import re
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import corpus as corpus_mod
from . import figures, oracle
from .distill import DistanceKind, RegressionNet
from .lattice import (
    EmissionLattice,
    alignment_posterior,
    compute_backward,
    compute_forward,
    lattice_dump,
    log_likelihood,
    node_occupancy,
)
from .model import (
    Dims,
    ModelParams,
    adam_step,
    edit_distance,
    ema_params,
    ema_update,
    encode,
    greedy_decode,
    init_optimizer,
    init_params,
    joint_emissions,
    load_checkpoint,
    predict,
    save_checkpoint,
    utterance_loss,
)
from .rng import stream
from .teacher import TeacherConfig, cache_targets, load_targets

AUX_VARIANTS = ("none", "joint", "token_sync")
DECODERS = ("transducer", "attention")
DISTANCES = tuple(k.value for k in DistanceKind)

# Auxiliary-weight grids swept by default: halvings from 1 for attention
# models, decades from 0.1 for transducers.
DEFAULT_SIGMA_GRID = {
    "attention": [1.0, 0.5, 0.25, 0.125, 0.0625],
    "transducer": [1e-1, 1e-2, 1e-3, 1e-4],
}

METRICS_COLUMNS = ["epoch", "main_loss", "aux_loss", "combined_loss", "dev_ter", "ema_dev_ter"]


class TrainAbortError(RuntimeError):
    """Raised when training hits a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    decoder: str = "transducer"
    aux: str = "none"
    sigma: float = 0.0
    distance: str = "l1_norm"
    use_raw_posterior: bool = False
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    ema_decay: float = 0.99
    eval_split: str = "dev"
    max_symbols_per_frame: int = 8
    d_emb_in: int = 16
    d_enc: int = 32
    d_pred: int = 32
    d_joint: int = 32
    d_dec: int = 32
    context_frames: int = 3
    data_dir: str = "data"
    out_dir: str = "run"

    PATH_FIELDS = ("data_dir", "out_dir")

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.aux not in AUX_VARIANTS:
            raise ValueError(f"aux must be one of {AUX_VARIANTS}, got {self.aux!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.aux == "token_sync" and self.decoder == "attention":
            raise ValueError("token_sync is a transducer-only auxiliary variant")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        # aux=none and sigma=0 are declared equivalent; normalize both ways so
        # equivalent configs produce identical artifacts.
        if self.aux == "none":
            self.sigma = 0.0
        if self.sigma == 0.0:
            self.aux = "none"

    def distance_kind(self) -> DistanceKind:
        return DistanceKind(self.distance)

    def hyper_dict(self) -> dict:
        """Config echo without filesystem paths (what artifacts embed)."""
        d = asdict(self)
        for name in self.PATH_FIELDS:
            d.pop(name)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GenDataConfig:
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    vocab_size: int = 16
    min_len: int = 3
    max_len: int = 12
    min_duration: int = 1
    max_duration: int = 3
    feature_dim: int = 8
    noise_std: float = 0.3
    confusability: float = 0.0
    words_per_class: int = 1
    teacher_class_mix: float = 0.0
    seed: int = 0
    teacher_seed: int = 1
    emb_dim: int = 32
    data_dir: str = "data"

    PATH_FIELDS = ("data_dir",)

    def __post_init__(self):
        if min(self.n_train, self.n_dev, self.n_test) < 0 or self.n_train < 1:
            raise ValueError("split sizes must be nonnegative and n_train >= 1")

    def corpus_config(self) -> corpus_mod.CorpusConfig:
        return corpus_mod.CorpusConfig(
            vocab_size=self.vocab_size,
            min_len=self.min_len,
            max_len=self.max_len,
            min_duration=self.min_duration,
            max_duration=self.max_duration,
            feature_dim=self.feature_dim,
            noise_std=self.noise_std,
            confusability=self.confusability,
            words_per_class=self.words_per_class,
            seed=self.seed,
        )

    @classmethod
    def from_dict(cls, data: dict) -> "GenDataConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# data generation


def generate_data(cfg: GenDataConfig) -> dict:
    """Write corpus, splits, and the teacher target store under data_dir."""
    ccfg = cfg.corpus_config()
    total = cfg.n_train + cfg.n_dev + cfg.n_test
    utterances, manifest = corpus_mod.gen_corpus(ccfg, total)
    fractions = [cfg.n_train / total, cfg.n_dev / total, cfg.n_test / total]
    train, dev, test = corpus_mod.split(utterances, fractions, cfg.seed)
    splits = {
        "train": [u.id for u in train],
        "dev": [u.id for u in dev],
        "test": [u.id for u in test],
    }
    corpus_mod.save_corpus(cfg.data_dir, utterances, manifest, splits)
    teacher_cfg = TeacherConfig(
        emb_dim=cfg.emb_dim,
        seed=cfg.teacher_seed,
        vocab_names=ccfg.vocab_names(),
        class_size=cfg.words_per_class,
        class_mix=cfg.teacher_class_mix,
    )
    cache_targets(teacher_cfg, utterances, cfg.data_dir)
    return {
        "counts": {k: len(v) for k, v in splits.items()},
        "n_symbols": ccfg.n_symbols,
        "data_dir": cfg.data_dir,
    }


def load_data(data_dir: str):
    """Returns ({split: [Utterance]}, corpus manifest, TargetStore)."""
    utterances, manifest, splits = corpus_mod.load_corpus(data_dir)
    if splits is None:
        raise ValueError(f"no splits.json under {data_dir}; run gen-data first")
    by_id = {u.id: u for u in utterances}
    parts = {name: [by_id[i] for i in ids] for name, ids in splits.items()}
    store = load_targets(data_dir)
    return parts, manifest, store


# ---------------------------------------------------------------------------
# evaluation


def evaluate_split(params: ModelParams, utterances, max_symbols_per_frame: int = 8) -> dict:
    """Greedy-decode a split and aggregate token error counts.

    TER = edit distance / reference length summed over the split; reference
    sequences keep their sentinels.
    """
    if not utterances:
        raise ValueError("cannot evaluate an empty split")
    total = {"dist": 0, "sub": 0, "ins": 0, "del": 0, "ref_len": 0}
    for utt in utterances:
        hyp = greedy_decode(params, utt.features, max_symbols_per_frame)
        dist, subs, ins, dels = edit_distance(hyp, utt.tokens)
        total["dist"] += dist
        total["sub"] += subs
        total["ins"] += ins
        total["del"] += dels
        total["ref_len"] += len(utt.tokens)
    ter = total["dist"] / total["ref_len"]
    return {
        "ter": ter,
        "substitutions": total["sub"],
        "insertions": total["ins"],
        "deletions": total["del"],
        "edit_distance": total["dist"],
        "reference_tokens": total["ref_len"],
        "n_utterances": len(utterances),
    }


# ---------------------------------------------------------------------------
# the training loop


def _model_dims(cfg: TrainConfig, manifest: dict, store) -> Dims:
    return Dims(
        n_symbols=manifest["n_symbols"],
        feature_dim=manifest["config"]["feature_dim"],
        d_emb_in=cfg.d_emb_in,
        d_enc=cfg.d_enc,
        d_pred=cfg.d_pred,
        d_joint=cfg.d_joint,
        d_dec=cfg.d_dec,
        emb_dim=store.emb_dim,
        context_frames=cfg.context_frames,
        bos_id=corpus_mod.BOS_ID,
        eos_id=corpus_mod.EOS_ID,
    )


def _checkpoint_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, f"ckpt_epoch_{epoch:04d}.json")


def _find_last_checkpoint(out_dir: str):
    best = None
    for path in glob.glob(os.path.join(out_dir, "ckpt_epoch_*.json")):
        m = re.search(r"ckpt_epoch_(\d+)\.json$", path)
        if m:
            epoch = int(m.group(1))
            if best is None or epoch > best[0]:
                best = (epoch, path)
    return best


def _write_metrics(out_dir: str, rows: list[dict]):
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRICS_COLUMNS])


def _read_metrics(out_dir: str) -> list[dict]:
    path = os.path.join(out_dir, "metrics.csv")
    if not os.path.exists(path):
        return []
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "epoch": int(rec["epoch"]),
                    **{c: float(rec[c]) for c in METRICS_COLUMNS if c != "epoch"},
                }
            )
    return rows


def train_run(cfg: TrainConfig, log=print) -> dict:
    """Run (or resume) one training configuration; returns the summary dict."""
    parts, manifest, store = load_data(cfg.data_dir)
    train_utts = sorted(parts["train"], key=lambda u: u.id)
    dev_utts = parts[cfg.eval_split]
    os.makedirs(cfg.out_dir, exist_ok=True)

    dims = _model_dims(cfg, manifest, store)
    params = init_params(cfg.seed, dims, cfg.decoder)
    opt = init_optimizer(params, lr=cfg.lr, ema_decay=cfg.ema_decay)
    rows: list[dict] = []
    start_epoch = 1

    resume = _find_last_checkpoint(cfg.out_dir)
    if resume is not None:
        last_epoch, path = resume
        params, opt, doc = load_checkpoint(path)
        stored = dict(doc.get("run_config") or {})
        current = cfg.hyper_dict()
        # extending the epoch budget is the one legitimate config change on resume
        stored.pop("epochs", None)
        current.pop("epochs", None)
        if stored != current:
            raise TrainAbortError(
                f"out_dir {cfg.out_dir} holds checkpoints from a different config; "
                "refusing to resume"
            )
        rows = [r for r in _read_metrics(cfg.out_dir) if r["epoch"] <= last_epoch]
        start_epoch = last_epoch + 1
        log(f"resuming from epoch {last_epoch}")

    kind = cfg.distance_kind()
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = stream(cfg.seed, "epoch-order", epoch).permutation(len(train_utts))
        sums = {"main": 0.0, "aux": 0.0, "combined": 0.0}
        for lo in range(0, len(order), cfg.batch_size):
            batch = sorted(
                (train_utts[i] for i in order[lo : lo + cfg.batch_size]),
                key=lambda u: u.id,
            )
            grads = None
            for utt in batch:
                targets = store.get(utt.id) if cfg.aux != "none" else None
                try:
                    step = utterance_loss(
                        params,
                        utt.features,
                        np.array(utt.tokens),
                        targets=targets,
                        aux_variant=cfg.aux,
                        sigma=cfg.sigma,
                        kind=kind,
                        **(
                            {"use_raw_posterior": cfg.use_raw_posterior}
                            if cfg.decoder == "transducer"
                            else {}
                        ),
                    )
                except (FloatingPointError, ValueError) as exc:
                    _dump_abort(cfg.out_dir, utt.id, epoch, opt.step, str(exc))
                    raise TrainAbortError(f"loss failed on {utt.id}: {exc}") from exc
                if not np.isfinite(step.combined):
                    _dump_abort(cfg.out_dir, utt.id, epoch, opt.step, "non-finite loss")
                    raise TrainAbortError(
                        f"non-finite loss on utterance {utt.id} at epoch {epoch}"
                    )
                if grads is None:
                    grads = {k: g.copy() for k, g in step.grads.items()}
                else:
                    for k, g in step.grads.items():
                        grads[k] += g
                sums["main"] += step.main
                sums["aux"] += step.aux
                sums["combined"] += step.combined
            scale = 1.0 / len(batch)
            grads = {k: g * scale for k, g in grads.items()}
            params, opt = adam_step(opt, params, grads)
            opt = ema_update(opt, params)

        n = len(train_utts)
        dev_live = evaluate_split(params, dev_utts, cfg.max_symbols_per_frame)
        dev_ema = evaluate_split(ema_params(opt, params), dev_utts, cfg.max_symbols_per_frame)
        row = {
            "epoch": epoch,
            "main_loss": sums["main"] / n,
            "aux_loss": sums["aux"] / n,
            "combined_loss": sums["combined"] / n,
            "dev_ter": dev_live["ter"],
            "ema_dev_ter": dev_ema["ter"],
        }
        rows.append(row)
        _write_metrics(cfg.out_dir, rows)
        save_checkpoint(
            _checkpoint_path(cfg.out_dir, epoch),
            params,
            opt,
            extra={"epoch": epoch, "run_config": cfg.hyper_dict()},
        )
        log(
            f"epoch {epoch:3d}: loss {row['combined_loss']:8.4f} "
            f"(main {row['main_loss']:8.4f} aux {row['aux_loss']:8.4f}) "
            f"dev TER {row['dev_ter']:6.2%} ema {row['ema_dev_ter']:6.2%}"
        )

    best_idx = min(range(len(rows)), key=lambda i: rows[i]["ema_dev_ter"])
    best_epoch = rows[best_idx]["epoch"]
    best_params, best_opt, _ = load_checkpoint(_checkpoint_path(cfg.out_dir, best_epoch))
    test_report = evaluate_split(
        ema_params(best_opt, best_params), parts["test"], cfg.max_symbols_per_frame
    )
    summary = {
        "run_config": cfg.hyper_dict(),
        "parameter_count": params.count(),
        "epochs_run": rows[-1]["epoch"],
        "best_epoch": best_epoch,
        "best_dev_ter": rows[best_idx]["ema_dev_ter"],
        "final_main_loss": rows[-1]["main_loss"],
        "final_aux_loss": rows[-1]["aux_loss"],
        "initial_aux_loss": rows[0]["aux_loss"],
        "test_ter": test_report["ter"],
        "test_report": test_report,
        "checkpoint_selection": "ema_dev_ter",
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    figures.training_curves(rows, os.path.join(cfg.out_dir, "metrics.png"))
    return summary


def _dump_abort(out_dir: str, utt_id: str, epoch: int, step: int, reason: str):
    with open(os.path.join(out_dir, "abort_diagnostic.json"), "w") as fh:
        json.dump(
            {"utterance_id": utt_id, "epoch": epoch, "adam_step": step, "reason": reason},
            fh,
            sort_keys=True,
            indent=1,
        )
        fh.write("\n")


# ---------------------------------------------------------------------------
# sigma sweep


def sweep_run(base: TrainConfig, sigmas=None, log=print) -> list[dict]:
    """Train+eval once per auxiliary weight (a 0 baseline is always included).

    Emits sweep.csv (one row per weight, dev/test TER columns, best-dev row
    marked) plus a figure; a failing child run is recorded in its row and
    the sweep continues.
    """
    if sigmas is None:
        sigmas = DEFAULT_SIGMA_GRID[base.decoder]
    sigmas = sorted(set(float(s) for s in sigmas) | {0.0})
    rows = []
    for sig in sigmas:
        cfg_kwargs = asdict(base)
        cfg_kwargs["sigma"] = sig
        if sig > 0 and base.aux == "none":
            cfg_kwargs["aux"] = "token_sync" if base.decoder == "transducer" else "joint"
        cfg_kwargs["out_dir"] = os.path.join(base.out_dir, f"sigma_{sig:g}")
        cfg = TrainConfig(**cfg_kwargs)
        log(f"sweep: sigma={sig:g} aux={cfg.aux} -> {cfg.out_dir}")
        try:
            summary = train_run(cfg, log=log)
            rows.append(
                {
                    "sigma": sig,
                    "aux": cfg.aux,
                    "status": "ok",
                    "best_epoch": summary["best_epoch"],
                    "dev_ter": summary["best_dev_ter"],
                    "test_ter": summary["test_ter"],
                }
            )
        except Exception as exc:  # child failure: record and continue
            rows.append(
                {
                    "sigma": sig,
                    "aux": cfg.aux,
                    "status": f"failed: {exc}",
                    "best_epoch": "",
                    "dev_ter": "",
                    "test_ter": "",
                }
            )
    ok_rows = [r for r in rows if r["status"] == "ok"]
    best = min(ok_rows, key=lambda r: r["dev_ter"]) if ok_rows else None
    for r in rows:
        r["best"] = 1 if best is not None and r is best else 0
    os.makedirs(base.out_dir, exist_ok=True)
    with open(os.path.join(base.out_dir, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["sigma", "aux", "status", "best_epoch", "dev_ter", "test_ter", "best"]
        writer.writerow(cols)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    figures.sweep_curve(rows, os.path.join(base.out_dir, "sweep.png"))
    return rows


# ---------------------------------------------------------------------------
# lattice inspection


def inspect_lattice(checkpoint_path: str, data_dir: str, utt_id: str, out_dir: str) -> dict:
    """Dump the full lattice computation for one utterance under a checkpoint."""
    params, _, _ = load_checkpoint(checkpoint_path)
    if params.decoder != "transducer":
        raise ValueError("lattice inspection needs a transducer checkpoint")
    utterances, _, _ = corpus_mod.load_corpus(data_dir)
    by_id = {u.id: u for u in utterances}
    if utt_id not in by_id:
        raise KeyError(f"unknown utterance id {utt_id!r}")
    utt = by_id[utt_id]
    tokens = np.array(utt.tokens)
    emissions = joint_emissions(
        params, encode(params, utt.features), predict(params, tokens), tokens
    )
    dump = lattice_dump(emissions)
    dump["utterance_id"] = utt_id
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, f"lattice_{utt_id}.json")
    with open(out_path, "w") as fh:
        json.dump(dump, fh, sort_keys=True)
        fh.write("\n")
    figures.lattice_heatmaps(dump, os.path.join(out_dir, f"lattice_{utt_id}.png"))
    return dump


# ---------------------------------------------------------------------------
# oracle equivalence checks


def random_emission_lattice(rng: np.random.Generator, T: int, N: int, K: int) -> EmissionLattice:
    logits = rng.normal(size=(T, N + 1, K))
    log_probs = logits - np.log(np.sum(np.exp(logits), axis=2, keepdims=True))
    tokens = rng.integers(1, K, size=N)
    return EmissionLattice(log_probs=log_probs, tokens=tokens)


def oracle_check(
    max_t: int = 5,
    max_n: int = 3,
    max_k: int = 4,
    instances: int = 50,
    seed: int = 0,
    tol: float = 1e-9,
    corrupt_beta=None,
) -> dict:
    """Compare the dynamic-programming route against brute-force enumeration.

    Checks, per random instance over the (T, N, K) grid: log-likelihood,
    raw and normalized posteriors, occupancy diagonal sums, and the
    enumeration count formula.  ``corrupt_beta`` is a fault-injection hook
    (maps the backward table to a corrupted copy) used to prove the checks
    can fail.
    """
    from math import comb

    report = {"checks": 0, "failures": [], "warnings": [], "grid": []}
    cases = [
        (t, n)
        for t in range(1, max_t + 1)
        for n in range(0, max_n + 1)
        if comb(t + n - 1, n) <= oracle.ENUMERATION_GUARD
    ]
    if not cases or instances <= 0:
        report["warnings"].append("empty size grid: vacuous pass")
        report["passed"] = True
        return report
    rng = stream(seed, "oracle-check")
    for i in range(instances):
        t, n = cases[i % len(cases)]
        k = int(rng.integers(2, max_k + 1))
        lat = random_emission_lattice(rng, t, n, k)
        paths = oracle.enumerate_alignments(t, n)
        if len(paths) != comb(t + n - 1, n):
            report["failures"].append(f"path count mismatch at T={t} N={n}")
        alpha = compute_forward(lat)
        beta = compute_backward(lat)
        if corrupt_beta is not None:
            beta = corrupt_beta(beta)
        log_z = log_likelihood(alpha, lat)
        if abs(log_z - oracle.exact_log_likelihood(lat)) > tol:
            report["failures"].append(f"log-likelihood mismatch at T={t} N={n} K={k}")
        gamma = node_occupancy(alpha, beta, log_z, lat)
        diag_sums = [
            sum(gamma[ti, c - ti] for ti in range(max(0, c - n), min(t - 1, c) + 1))
            for c in range(t + n)
        ]
        if np.max(np.abs(np.array(diag_sums) - 1.0)) > 1e-6:
            report["failures"].append(f"occupancy diagonal sums off at T={t} N={n} K={k}")
        if n > 0:
            q = alignment_posterior(gamma)
            q_ref = oracle.exact_posterior(lat)
            if np.max(np.abs(q.raw - q_ref.raw)) > tol:
                report["failures"].append(f"raw posterior mismatch at T={t} N={n} K={k}")
            if np.max(np.abs(q.normalized - q_ref.normalized)) > tol:
                report["failures"].append(f"normalized posterior mismatch at T={t} N={n} K={k}")
            # loss route: vectorized expectation against the literal double sum
            f_dim, p_dim = 3, 2
            phi = rng.normal(size=(t, f_dim))
            psi = rng.normal(size=(n, p_dim))
            targets = rng.normal(size=(n, 4))
            w = rng.normal(size=(4, f_dim + p_dim))
            b = rng.normal(size=4)
            reg = RegressionNet(weights=w, bias=b, pair_split=f_dim)
            from .distill import joint_regression_loss

            got = joint_regression_loss(
                phi, psi, q, targets, reg, DistanceKind.L1_NORMALIZED
            ).value
            want = oracle.exact_joint_loss(
                phi, psi, q.normalized, targets, w, b, "l1_norm"
            )
            if abs(got - want) > 1e-9:
                report["failures"].append(f"joint loss mismatch at T={t} N={n}")
        report["checks"] += 1
    report["grid"] = [list(c) for c in cases]
    report["passed"] = not report["failures"]
    return report
