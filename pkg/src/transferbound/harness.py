"""Experiment orchestration: data ingestion, attack-success tables, CSV output.

Everything here is plumbing around the other modules: build surrogate and
held-out target ensembles from disjoint seeds, run the configured attack
methods over a batch of test examples, score transfer success, evaluate
bound diagnostics, and emit schema-stable CSV files.  Reruns with the
same seeds produce byte-identical outputs apart from the single
timestamp comment line at the top of each CSV.
"""

from __future__ import annotations

import datetime
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import attacks as A
from . import bounds as B
from . import forge as F
from . import models as M

CIFAR_RECORD = 3073  # 1 label byte + 32*32*3 pixel bytes

ASR_COLUMNS = "method,target_set,seed,examples,asr_percent"
ASR_SUMMARY_COLUMNS = "method,target_set,seeds,examples,asr_percent"
BENCH_COLUMNS = "method,n_iter,components,snapshots,predicted,observed"

DATASETS = ("gaussian_mixture", "two_rings", "cifar10")

ALL_PHASES = frozenset({"forge", "attack", "asr", "bounds", "bench"})


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def load_cifar10_binary(path) -> tuple:
    """Read a CIFAR-10 binary batch: 3073-byte records of one label byte
    followed by 3072 channel-planar pixel bytes, scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD != 0:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise ValueError(
            f"corrupt batch file {path}: {len(raw) - offset} trailing bytes "
            f"at byte offset {offset} (records are {CIFAR_RECORD} bytes)")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(
            f"invalid label {int(labels[i])} at byte offset {i * CIFAR_RECORD}")
    pixels = buf[:, 1:].astype(np.float64) / 255.0
    return pixels, labels


# ---------------------------------------------------------------------------
# attack-success tables
# ---------------------------------------------------------------------------


@dataclass
class AsrCell:
    rate: float
    examples: int
    seeds: int


@dataclass
class AsrTable:
    """Success rates keyed by (method, target-set name)."""

    rows: dict

    def __post_init__(self):
        for key, cell in self.rows.items():
            if not 0.0 <= cell.rate <= 1.0:
                raise ValueError(f"rate out of range for {key}: {cell.rate}")
            if cell.examples <= 0 or cell.seeds <= 0:
                raise ValueError(f"counts must be positive for {key}")

    @staticmethod
    def combine(tables: Sequence["AsrTable"]) -> "AsrTable":
        """Average rates across per-seed tables (equal weight per seed)."""
        if not tables:
            raise ValueError("nothing to combine")
        keys = list(tables[0].rows)
        merged = {}
        for key in keys:
            cells = [t.rows[key] for t in tables]
            if len({c.examples for c in cells}) != 1:
                raise ValueError(f"example counts differ across seeds for {key}")
            merged[key] = AsrCell(
                rate=float(np.mean([c.rate for c in cells])),
                examples=cells[0].examples,
                seeds=sum(c.seeds for c in cells),
            )
        return AsrTable(merged)


def evaluate_asr(x_hat, labels, target_sets: Mapping[str, Sequence[M.Weights]],
                 targeted: bool = False, target_labels=None,
                 method: str = "attack") -> AsrTable:
    """Score adversarial examples against named model sets.

    Untargeted success is argmax != y; targeted success is argmax == the
    intended class.  The rate averages over every (example, model) pair
    in a set.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    labels = np.asarray(labels)
    if x_hat.ndim != 2 or labels.shape != (x_hat.shape[0],):
        raise ValueError("need a (n, d) batch with one label per row")
    if targeted:
        if target_labels is None:
            raise ValueError("targeted evaluation needs target labels")
        target_labels = np.asarray(target_labels)
        if target_labels.shape != labels.shape:
            raise ValueError("target labels must align with labels")
    if not target_sets:
        raise ValueError("need at least one target set")
    rows = {}
    for name, models in target_sets.items():
        if len(models) == 0:
            raise ValueError(f"target set {name!r} is empty")
        hits = 0
        total = 0
        for w in models:
            pred = M.predict_classes(w, x_hat)
            if targeted:
                hits += int(np.sum(pred == target_labels))
            else:
                hits += int(np.sum(pred != labels))
            total += labels.size
        rows[(method, name)] = AsrCell(hits / total, int(labels.size), 1)
    return AsrTable(rows)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    out_dir: str
    dataset: str = "gaussian_mixture"
    dataset_path: Optional[str] = None
    input_dim: int = 6
    num_classes: int = 3
    n_train: int = 600
    n_test: int = 300
    separation: float = 5.0
    components: int = 4
    snapshots: int = 4
    pretrain_epochs: int = 15
    proto_lr: float = 0.05
    n_examples: int = 6
    bound_examples: int = 4
    seeds: tuple = (0,)
    methods: tuple = A.METHODS
    attack: A.AttackConfig = field(default_factory=A.AttackConfig)
    bound: B.BoundConfig = field(default_factory=B.BoundConfig)
    bound_r: Optional[float] = None  # None: adapt to each example's risk
    targeted: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "cifar10" and not self.dataset_path:
            raise ValueError("cifar10 needs dataset_path")
        if self.components < 1 or self.snapshots < 1:
            raise ValueError("components and snapshots must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        bad = [m for m in self.methods if m not in A.METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        if self.attack.method not in self.methods:
            # bound diagnostics run on the primary configured method
            raise ValueError(
                f"primary method {self.attack.method!r} missing from methods")


def _dataset_for(cfg: ExperimentConfig, seed: int) -> F.Dataset:
    if cfg.dataset == "cifar10":
        X, y = load_cifar10_binary(cfg.dataset_path)
        need = cfg.n_train + cfg.n_test
        if X.shape[0] < need:
            raise ValueError(
                f"cifar batch holds {X.shape[0]} records, need {need}")
        return F.Dataset(X[: cfg.n_train], y[: cfg.n_train],
                         X[cfg.n_train : need], y[cfg.n_train : need],
                         num_classes=10)
    return F.make_dataset(cfg.dataset, cfg.n_train, cfg.n_test, seed,
                          input_dim=cfg.input_dim,
                          num_classes=cfg.num_classes,
                          separation=cfg.separation)


def _prototypes(cfg: ExperimentConfig, data: F.Dataset, base_seed: int) -> list:
    d = data.input_dim
    k = data.num_classes
    desk = F.desk_prototypes(d, k, gamma=cfg.attack.gamma, base_seed=base_seed,
                             epochs=cfg.snapshots, lr=cfg.proto_lr)
    protos = []
    for i in range(cfg.components):
        proto = desk[i % len(desk)]
        if i >= len(desk):
            proto = replace(proto, seed=proto.seed + 7919 * (i // len(desk)))
        protos.append(proto)
    return protos


def _method_config(cfg: ExperimentConfig, method: str, seed: int,
                   ensemble: F.SurrogateEnsemble) -> A.AttackConfig:
    # batch methods need an explicit iteration budget; ensemble sweeps fix
    # their own (one pass over all K snapshots)
    n_iter = ensemble.size if method == "rap" else None
    n_ls = cfg.attack.n_ls
    if method == "drap" and n_ls > ensemble.snapshots_per_component:
        # a late start longer than the run makes no sense; fall back to the
        # standard schedule (no late start on short runs, 5 epochs otherwise)
        n_ls = 0 if ensemble.snapshots_per_component <= 5 else 5
    return replace(cfg.attack, method=method, targeted=cfg.targeted,
                   seed=seed, n_iter=n_iter, n_ls=n_ls)


# ---------------------------------------------------------------------------
# CSV plumbing
# ---------------------------------------------------------------------------


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ")


def _write_csv(path: Path, header: str, lines: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# generated {_timestamp()}\n")
        fh.write(header + "\n")
        for line in lines:
            fh.write(line + "\n")
    return path


def _config_lines(cfg: ExperimentConfig) -> list:
    pairs = []
    for f in sorted(ExperimentConfig.__dataclass_fields__):
        value = getattr(cfg, f)
        if f == "attack":
            for sub in sorted(A.AttackConfig.__dataclass_fields__):
                if sub in ("transform_hook",):
                    continue
                pairs.append(f"attack.{sub} = {getattr(value, sub)!r}")
        elif f == "bound":
            for sub in sorted(B.BoundConfig.__dataclass_fields__):
                if sub == "t_grid":
                    continue
                pairs.append(f"bound.{sub} = {getattr(value, sub)!r}")
        else:
            pairs.append(f"{f} = {value!r}")
    return pairs


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, phases=None) -> dict:
    """Run the configured protocol and write artifacts under cfg.out_dir.

    phases selects what gets produced: "forge" saves the ensembles,
    "attack" saves adversarial batches and traces, "asr" the success
    tables, "bounds" the bound-diagnostic rows (for the primary method),
    "bench" the gradient-call accounting.  Default: everything.
    """
    phases = ALL_PHASES if phases is None else frozenset(phases)
    unknown = phases - ALL_PHASES
    if unknown:
        raise ValueError(f"unknown phases {sorted(unknown)}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    need_attacks = bool(phases & {"attack", "asr", "bounds", "bench"})

    written = {}
    per_seed_tables = []
    asr_lines = []
    bound_lines = []
    bench_lines = []

    for seed in cfg.seeds:
        data = _dataset_for(cfg, seed)
        if data.X_test.shape[0] < cfg.n_examples:
            raise ValueError(f"test split holds {data.X_test.shape[0]} "
                             f"examples, need {cfg.n_examples}")
        surrogate = F.build_ensemble(
            _prototypes(cfg, data, base_seed=1000 * seed + 17), data,
            pretrain_epochs=cfg.pretrain_epochs)
        target_ens = F.build_ensemble(
            _prototypes(cfg, data, base_seed=1000 * seed + 563), data,
            pretrain_epochs=cfg.pretrain_epochs)
        targets = {"heldout": list(target_ens.all_members())}

        if "forge" in phases:
            surrogate.save(out / "ensembles" / f"seed{seed}" / "surrogate")
            target_ens.save(out / "ensembles" / f"seed{seed}" / "target")
            written.setdefault("ensembles", out / "ensembles")
        if not need_attacks:
            continue

        X = data.X_test[: cfg.n_examples]
        y = data.y_test[: cfg.n_examples].astype(int)
        y_t = (y + 1) % data.num_classes

        states_by_method = {}
        for method in cfg.methods:
            acfg = _method_config(cfg, method, seed, surrogate)

            def one(idx, _acfg=acfg):
                lbl = int(y_t[idx] if cfg.targeted else y[idx])
                return A.run_attack(X[idx], lbl, surrogate, _acfg)

            if cfg.workers > 1:
                with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                    states = list(pool.map(one, range(cfg.n_examples)))
            else:
                states = [one(i) for i in range(cfg.n_examples)]
            states_by_method[method] = (acfg, states)

            if "attack" in phases:
                adv = np.stack([s.x_hat for s in states])
                np.save(out / f"adv_{method}_seed{seed}.npy", adv)
                trace_dir = out / "traces"
                trace_dir.mkdir(exist_ok=True)
                A.write_trace(states[0], acfg,
                              trace_dir / f"trace_{method}_seed{seed}.csv")
                written.setdefault("traces", trace_dir)
            if "bench" in phases:
                s0 = states[0]
                bench_lines.append(
                    f"{method},{len(s0.trace)},{surrogate.num_components},"
                    f"{surrogate.snapshots_per_component},"
                    f"{s0.predicted_grad_calls},{s0.grad_calls}")

        if "asr" in phases:
            tables = []
            for method in cfg.methods:
                _, states = states_by_method[method]
                adv = np.stack([s.x_hat for s in states])
                table = evaluate_asr(adv, y, targets, targeted=cfg.targeted,
                                     target_labels=y_t, method=method)
                tables.append(table)
                for (meth, name), cell in sorted(table.rows.items()):
                    asr_lines.append(f"{meth},{name},{seed},{cell.examples},"
                                     f"{100.0 * cell.rate:.1f}")
            merged = {}
            for t in tables:
                merged.update(t.rows)
            per_seed_tables.append(AsrTable(merged))

        if "bounds" in phases:
            _, states = states_by_method[cfg.attack.method]
            for idx in range(min(cfg.bound_examples, cfg.n_examples)):
                x_hat = states[idx].x_hat
                lbl = int(y[idx])
                risk = B.profile(x_hat, surrogate, lbl).surrogate_risk
                r = cfg.bound_r if cfg.bound_r is not None else risk + 0.05
                rep = B.assemble_bound(
                    x_hat, X[idx], cfg.attack.gamma, surrogate,
                    targets["heldout"], lbl, cfg.bound, r,
                    seed=1000 * seed + idx)
                bound_lines.append(f"# seed={seed} example={idx} "
                                   f"method={cfg.attack.method}")
                bound_lines.append(rep.csv_row())

    if "asr" in phases:
        written["asr"] = _write_csv(out / "asr.csv", ASR_COLUMNS, asr_lines)
        combined = AsrTable.combine(per_seed_tables)
        summary_lines = [
            f"{meth},{name},{cell.seeds},{cell.examples},{100.0 * cell.rate:.1f}"
            for (meth, name), cell in sorted(combined.rows.items())]
        written["asr_summary"] = _write_csv(out / "asr_summary.csv",
                                            ASR_SUMMARY_COLUMNS, summary_lines)
        written["asr_table"] = combined
    if "bounds" in phases:
        written["bounds"] = _write_csv(out / "bounds.csv", B.BOUND_COLUMNS,
                                       bound_lines)
    if "bench" in phases:
        written["bench"] = _write_csv(out / "bench.csv", BENCH_COLUMNS,
                                      bench_lines)
    if need_attacks:
        written["adv_dir"] = out

    cfg_path = out / "config_used.txt"
    cfg_path.write_text("\n".join(_config_lines(cfg)) + "\n", encoding="utf-8")
    written["config"] = cfg_path
    return written
