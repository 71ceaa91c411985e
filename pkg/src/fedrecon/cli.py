"""Config-driven experiment runner.

Verbs:
  run       execute train -> unlearn -> capture -> attack(s) -> metrics
  gradcheck run the engine finite-difference suites
  report    print the method x metric comparison table of a finished run

A JSON config fully determines a run; the master seed splits into per-role
child seeds (see seeds.py), and three attack seeds are aggregated by median
into the comparison table. FEDRECON_OUT overrides the output directory and is
the only environment hook.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, dataio, fedsim, metrics
from .attack import (
    AttackConfig,
    AttackResult,
    persist_result,
    reconstruct_remaining,
    run_attack,
)
from .engine import gradcheck as engine_gradcheck
from .engine.kernels import active_backend_name
from .errors import ConfigError, FedreconError
from .models import ArchSpec, build_model
from .seeds import child_seed

# mode token -> (attack mode, init, freeze_part, report row label, target set)
MODE_TOKENS = {
    "dlg": ("dlg_baseline", "uniform_noise", True, "DLG", "full"),
    "dragd": ("dragd", "uniform_noise", True, "DRAGD", "df"),
    "dragdp": ("dragdp", "public_prior", True, "DRAGDP", "df"),
    "cpl": ("dragd", "cpl_tile", True, "CPL", "df"),
    "dragd_nofreeze": ("dragd", "uniform_noise", False, "DRAGD-nonfixed", "df"),
}

_METRIC_ARROWS = {"mse": "↓", "psnr": "↑", "ssim": "↑"}


@dataclass
class ExperimentConfig:
    name: str
    master_seed: int
    dataset: dict
    model: dict
    fed: dict
    scenario: dict
    attack: dict
    modes: list
    out_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            cfg = cls(
                name=raw.get("name", "experiment"),
                master_seed=int(raw.get("master_seed", 0)),
                dataset=dict(raw["dataset"]),
                model=dict(raw["model"]),
                fed=dict(raw.get("fed", {})),
                scenario=dict(raw["scenario"]),
                attack=dict(raw.get("attack", {})),
                modes=list(raw.get("modes", ["dlg", "dragd", "dragdp"])),
                out_dir=raw.get("out_dir", "runs/latest"),
                raw=raw,
            )
        except KeyError as exc:
            raise ConfigError(f"config is missing required section {exc}")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for token in self.modes:
            if token not in MODE_TOKENS:
                raise ConfigError(f"unknown mode token {token!r} (have {sorted(MODE_TOKENS)})")
        total = int(self.scenario.get("total", 0))
        forget = int(self.scenario.get("forget", 0))
        if not (0 < forget < total):
            raise ConfigError(f"need 0 < forget < total, got forget={forget} total={total}")
        if self.scenario.get("mode", "simulated") not in ("simulated", "retrain"):
            raise ConfigError("scenario.mode must be simulated or retrain")
        source = self.dataset.get("source")
        if source not in (
            "auto_mnist",
            "synthetic_digits",
            "synthetic_blobs",
            "idx",
            "cifar10",
            "image_dir",
        ):
            raise ConfigError(f"unknown dataset source {source!r}")
        if source == "idx":
            for key in ("images", "labels"):
                p = self.dataset.get(key)
                if not p or not Path(p).exists():
                    raise ConfigError(f"dataset.{key} path {p!r} does not exist")
        if source in ("cifar10", "image_dir"):
            p = self.dataset.get("dir")
            if not p or not Path(p).exists():
                raise ConfigError(f"dataset.dir path {p!r} does not exist")
        ArchSpec(
            self.model.get("arch", "lenet_small"),
            tuple(self.model.get("input_shape", (1, 28, 28))),
            int(self.model.get("num_classes", 10)),
            float(self.model.get("width_scale", 1.0)),
        )
        if int(self.attack.get("num_seeds", 3)) < 1:
            raise ConfigError("attack.num_seeds must be >= 1")

    def resolved(self) -> dict:
        out = dict(self.raw)
        out["out_dir"] = self.out_dir
        out["master_seed"] = self.master_seed
        out["modes"] = list(self.modes)
        return out


def _load_dataset(cfg: ExperimentConfig) -> dataio.LabeledDataset:
    d = cfg.dataset
    source = d["source"]
    seed = child_seed(cfg.master_seed, "dataset")
    if source == "synthetic_digits":
        return dataio.synthetic_digits(int(d.get("count", 192)), seed)
    if source == "synthetic_blobs":
        return dataio.synthetic_blobs(
            int(d.get("count", 128)),
            seed,
            classes=int(d.get("classes", 2)),
            shape=tuple(d.get("shape", (1, 8, 8))),
        )
    if source == "idx":
        return dataio.load_idx(d["images"], d["labels"])
    if source == "cifar10":
        return dataio.load_cifar10_binary(d["dir"])
    if source == "image_dir":
        return dataio.load_image_dir(d["dir"], int(d.get("target_size", 32)))
    # auto_mnist: real IDX files when present, synthetic digits otherwise
    root = Path(d.get("dir", "data/mnist"))
    images = root / "train-images-idx3-ubyte"
    labels = root / "train-labels-idx1-ubyte"
    if images.exists() and labels.exists():
        return dataio.load_idx(images, labels)
    return dataio.synthetic_digits(int(d.get("count", 192)), seed)


def _choose_scenario(cfg: ExperimentConfig, dataset) -> fedsim.UnlearnScenario:
    s = cfg.scenario
    total = int(s["total"])
    forget = int(s["forget"])
    remain = total - forget
    if s.get("subset_indices"):
        chosen = np.asarray(s["subset_indices"], dtype=np.int64)
        if chosen.size != total:
            raise ConfigError(f"subset_indices must list {total} indices")
    else:
        rng = np.random.Generator(np.random.PCG64(child_seed(cfg.master_seed, "scenario")))
        order = rng.permutation(len(dataset))
        if s.get("distinct_remain_labels", True):
            # anchor images of pairwise-distinct classes resolve same-class
            # ambiguity inside the small Part batch
            rest, remain_idx, seen = [], [], set()
            for i in order:
                lab = int(dataset.labels[i])
                if len(remain_idx) < remain and lab not in seen:
                    seen.add(lab)
                    remain_idx.append(i)
                else:
                    rest.append(i)
            if len(remain_idx) < remain:
                raise ConfigError(
                    f"dataset offers {len(remain_idx)} distinct labels, "
                    f"scenario wants {remain} anchor images"
                )
            forget_idx = rest[:forget]
        else:
            forget_idx = order[:forget].tolist()
            remain_idx = order[forget : forget + remain].tolist()
        chosen = np.array(list(forget_idx) + list(remain_idx), dtype=np.int64)
    full_set = dataset.subset(chosen, name="D")
    scenario = fedsim.UnlearnScenario(
        full_set=full_set,
        forget_indices=np.arange(forget),
        mode=s.get("mode", "simulated"),
        forget_global=chosen[:forget],
    )
    return scenario, chosen


def _fed_config(cfg: ExperimentConfig) -> fedsim.FedConfig:
    f = cfg.fed
    return fedsim.FedConfig(
        clients=int(f.get("clients", 10)),
        rounds=int(f.get("rounds", 0)),
        local_epochs=int(f.get("local_epochs", 1)),
        local_lr=float(f.get("local_lr", 0.1)),
        batch_size=int(f.get("batch_size", 1)),
        seed=child_seed(cfg.master_seed, "fed"),
    )


def _attack_config(cfg: ExperimentConfig, token: str, seed: int) -> AttackConfig:
    a = cfg.attack
    mode, init, freeze, _, _ = MODE_TOKENS[token]
    return AttackConfig(
        eta_r=float(a.get("eta_r", 0.05)),
        eta_f=float(a.get("eta_f", 0.05)),
        iterations=int(a.get("iterations", 300)),
        mode=mode,
        freeze_part=freeze,
        init=init,
        clamp_pixels=bool(a.get("clamp_pixels", True)),
        labels_known=bool(a.get("labels_known", True)),
        loss_mode=a.get("loss_mode", "sq_euclid"),
        optimizer=a.get("optimizer", "gd"),
        seed=seed,
    )


@dataclass
class RunReport:
    out_dir: Path
    rows: list  # (label, set, {metric: median})
    per_seed: dict

    def table_text(self) -> str:
        return _format_table(self.rows)


def _format_table(rows) -> str:
    header = f"{'method':<16}{'set':<6}" + "".join(
        f"{name.upper() + _METRIC_ARROWS[name]:>12}" for name in ("mse", "psnr", "ssim")
    )
    lines = [header, "-" * len(header)]
    for label, set_name, med in rows:
        lines.append(
            f"{label:<16}{set_name:<6}"
            + "".join(f"{med[m]:>12.5g}" for m in ("mse", "psnr", "ssim"))
        )
    return "\n".join(lines)


def _mean_metrics(rows: list) -> dict:
    return {
        m: float(np.mean([r[m] for r in rows])) for m in ("mse", "psnr", "ssim")
    }


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    out_dir = Path(os.environ.get("FEDRECON_OUT", cfg.out_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    dataset = _load_dataset(cfg)
    fed_cfg = _fed_config(cfg)
    partition = dataio.dirichlet_partition(
        dataset,
        fed_cfg.clients,
        float(cfg.fed.get("alpha", 0.1)),
        child_seed(cfg.master_seed, "partition"),
    )
    model0 = build_model(
        ArchSpec(
            cfg.model.get("arch", "lenet_small"),
            tuple(cfg.model.get("input_shape", (1, 28, 28))),
            int(cfg.model.get("num_classes", 10)),
            float(cfg.model.get("width_scale", 1.0)),
        ),
        seed=child_seed(cfg.master_seed, "model"),
    )
    theta_star = fedsim.train_federated(model0, dataset, partition, fed_cfg)
    scenario, chosen_global = _choose_scenario(cfg, dataset)
    theta_u = fedsim.unlearn(model0, theta_star, scenario, dataset, partition, fed_cfg)
    pair = fedsim.capture_pair(theta_star, theta_u, scenario)
    fedsim.save_pair(pair, out_dir / "capture")

    # the public pool is disjoint from every image of D, not only from D_f
    pool_exclude = set(chosen_global.tolist())
    pool_indices = np.array(
        [i for i in range(len(dataset)) if i not in pool_exclude], dtype=np.int64
    )
    public_pool = dataset.subset(pool_indices, "D_pub") if pool_indices.size else None

    num_seeds = int(cfg.attack.get("num_seeds", 3))
    needs_stage1 = [t for t in cfg.modes if MODE_TOKENS[t][0] != "dlg_baseline"]
    per_seed: dict = {token: [] for token in cfg.modes}
    part_per_seed: list = []
    grid_cols = int(np.ceil(np.sqrt(max(len(scenario.full_set), 1))))

    truth_grid = np.concatenate(
        [scenario.forget_set().images, scenario.remain_set().images]
    )
    dataio.write_image_grid(
        truth_grid, out_dir / ("truth.ppm" if truth_grid.shape[1] == 3 else "truth.pgm"), grid_cols
    )

    for k in range(num_seeds):
        attack_seed = child_seed(cfg.master_seed, "attack", k)
        stage1 = None
        if needs_stage1:
            remain = scenario.remain_set()
            stage1 = reconstruct_remaining(
                pair,
                _attack_config(cfg, needs_stage1[0], attack_seed),
                remain.images.shape,
                remain.labels,
            )
        for token in cfg.modes:
            config = _attack_config(cfg, token, attack_seed)
            result = run_attack(
                pair,
                config,
                scenario,
                ground_truth=scenario.full_set,
                public_pool=public_pool,
                step1_state=stage1 if config.mode != "dlg_baseline" else None,
            )
            persist_result(result, out_dir / token / f"seed{k}", grid_cols)
            target_set = MODE_TOKENS[token][4]
            per_seed[token].append(_mean_metrics(result.metrics[target_set]))
        if needs_stage1:
            # Part row: the stage-I reconstruction scored against D_r, and the
            # stage-I artifacts persisted so freeze/anchor checks can compare
            remain = scenario.remain_set()
            part_rows = metrics.score_batch(
                stage1.nr_pixels, remain.images, stage1.nr_labels, remain.labels
            )
            part_per_seed.append(_mean_metrics(part_rows))
            part_result = AttackResult(
                state=stage1,
                config=_attack_config(cfg, needs_stage1[0], attack_seed),
                metrics={"dr": part_rows},
                iterations_run=len(stage1.loss_history_step1),
                wall_seconds=0.0,
            )
            persist_result(part_result, out_dir / "part" / f"seed{k}", grid_cols)

    rows = []
    if part_per_seed:
        rows.append(("Part", "dr", _median_over_seeds(part_per_seed)))
    for token in cfg.modes:
        label, target_set = MODE_TOKENS[token][3], MODE_TOKENS[token][4]
        rows.append((label, target_set, _median_over_seeds(per_seed[token])))

    _write_report(out_dir, rows)
    manifest = {
        "name": cfg.name,
        "version": __version__,
        "kernel_backend": active_backend_name(),
        "config": cfg.resolved(),
        "derived_seeds": {
            "dataset": child_seed(cfg.master_seed, "dataset"),
            "partition": child_seed(cfg.master_seed, "partition"),
            "model": child_seed(cfg.master_seed, "model"),
            "fed": child_seed(cfg.master_seed, "fed"),
            "scenario": child_seed(cfg.master_seed, "scenario"),
            "attack": [child_seed(cfg.master_seed, "attack", k) for k in range(num_seeds)],
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "wall_seconds": time.time() - started,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return RunReport(out_dir, rows, per_seed)


def _median_over_seeds(entries: list) -> dict:
    return {
        m: float(np.median([e[m] for e in entries])) for m in ("mse", "psnr", "ssim")
    }


def _write_report(out_dir: Path, rows) -> None:
    import csv as _csv

    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["method", "set", "mse", "psnr", "ssim"])
        for label, set_name, med in rows:
            writer.writerow(
                [label, set_name]
                + [format(med[m], ".17g") for m in ("mse", "psnr", "ssim")]
            )
    (out_dir / "report.txt").write_text(_format_table(rows) + "\n")


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.modes:
        cfg.modes = args.modes.split(",")
        cfg.validate()
    if args.dry_run:
        print(json.dumps(cfg.resolved(), indent=2))
        return 0
    report = run_experiment(cfg)
    print(report.table_text())
    print(f"artifacts: {report.out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    results = engine_gradcheck.run_all(
        param_trials=args.param_trials, data_trials=args.data_trials, seed=args.seed or 0
    )
    width = max(len(r.name) for r in results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "ok " if r.passed else "FAIL"
        print(f"{status} {r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  (< {r.threshold:g})")
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    report_csv = run_dir / "report.csv"
    missing = [str(p) for p in (run_dir / "manifest.json", report_csv) if not p.exists()]
    if missing:
        print(f"error: missing artifacts: {', '.join(missing)}", file=sys.stderr)
        return 1
    import csv as _csv

    rows = []
    with open(report_csv, newline="") as fh:
        for row in _csv.DictReader(fh):
            rows.append(
                (
                    row["method"],
                    row["set"],
                    {m: float(row[m]) for m in ("mse", "psnr", "ssim")},
                )
            )
    print(_format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrecon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--dry-run", action="store_true", help="validate and print the config")
    p_run.add_argument("--modes", default=None, help="comma list, e.g. dlg,dragd,dragdp")
    p_run.set_defaults(func=cmd_run)

    p_gc = sub.add_parser("gradcheck", help="finite-difference engine validation")
    p_gc.add_argument("--param-trials", type=int, default=6)
    p_gc.add_argument("--data-trials", type=int, default=2)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(func=cmd_gradcheck)

    p_rep = sub.add_parser("report", help="print the comparison table of a run")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FedreconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
