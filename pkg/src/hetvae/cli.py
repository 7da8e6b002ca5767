"""Command-line entry points: generate, train, evaluate, interpolate, ablate."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import data as dt
from . import evaluation as ev
from . import numgrad as ng
from . import objective as ob
from .model import ConfigError, HetvaeConfig, HeTVAE
from .rng import stream

log = logging.getLogger("hetvae")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "synthetic": {k: v for k, v in asdict(dt.SyntheticConfig()).items() if k != "seed"},
    "model": asdict(HetvaeConfig()),
    "train": {k: v for k, v in ob.TrainConfig().to_json().items() if k != "seed"},
    "eval": {"fraction": 0.5, "n_samples": 100, "n_seeds": 5, "chunk": 16},
    "interpolate": {"ids": [], "sizes": [3, 10, 20], "grid": 101, "n_samples": 100, "split": "test"},
    "ablate": {"names": ["full", "-HET-ALO"]},
}

ABLATIONS = {
    "full": {},
    "-ALO": {"alo": False},
    "-DET": {"det_path": False},
    "-INT": {"int_path": False},
    "-HET-ALO": {"het": False, "alo": False},
    "-DET-ALO": {"det_path": False, "alo": False},
    "-PROB-ALO": {"prob_path": False, "alo": False},
    "-INT-DET-ALO": {"int_path": False, "det_path": False, "alo": False},
    "-HET-INT-DET-ALO": {"het": False, "int_path": False, "det_path": False, "alo": False},
}

SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, extra: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _parse_set(items) -> dict:
    """``section.key=value`` pairs into a nested dict; values parse as JSON when possible."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = out
        parts = path.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return out


def resolve_config(config_path, overrides, seed) -> dict:
    """Built-in defaults < config file < --set flags < --seed."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        file_cfg.pop("config_hash", None)
        cfg = _merge(cfg, file_cfg, "")
    cfg = _merge(cfg, _parse_set(overrides), "")
    if seed is not None:
        cfg["seed"] = seed
    model_cfg(cfg).validate()
    train_cfg(cfg).validate()
    synthetic_cfg(cfg).validate()
    return cfg


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def model_cfg(cfg: dict) -> HetvaeConfig:
    try:
        return HetvaeConfig.from_json(cfg["model"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_cfg(cfg: dict) -> ob.TrainConfig:
    return ob.TrainConfig.from_json({**cfg["train"], "seed": int(cfg["seed"])})


def synthetic_cfg(cfg: dict) -> dt.SyntheticConfig:
    try:
        return dt.SyntheticConfig(**cfg["synthetic"], seed=int(cfg["seed"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def training_identity(cfg: dict) -> dict:
    """The parts of a config a checkpoint depends on.

    The iteration target is excluded so a finished run can be extended.
    """
    train = {k: v for k, v in cfg["train"].items() if k not in ("iterations", "checkpoint_every")}
    return {"seed": cfg["seed"], "model": cfg["model"], "train": train}


# ---------------------------------------------------------------------------
# shared plumbing


def _prepare_out(out: Path, names, force: bool) -> None:
    clash = [n for n in names if (out / n).exists()]
    if clash and not force:
        raise ConfigError(f"{out} already holds {', '.join(clash)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(data_dir: Path, split: str) -> list[dt.IrregularSeries]:
    return dt.read_dataset(Path(data_dir) / f"{split}.jsonl")


class TrainedRun:
    """A checkpoint reloaded together with its normalizer and union times."""

    def __init__(self, run_dir: Path):
        path = Path(run_dir) / "checkpoint.json"
        if not path.exists():
            raise dt.DataError(f"no checkpoint found at {path}")
        params, meta = ng.load_checkpoint(path)
        self.meta = meta
        self.config = meta["config"]
        self.normalizer = dt.Normalizer.from_json(meta["normalizer"])
        union = [np.asarray(t, dtype=np.float64) for t in meta["union_times"]]
        self.model = HeTVAE(model_cfg(self.config), union, params=params)

    def check(self, cfg: dict) -> None:
        want = config_hash(training_identity(cfg))
        have = self.meta["config_hash"]
        if want != have:
            raise ConfigError(f"checkpoint was trained with config hash {have}, current config hashes to {want}")


def _checkpoint_meta(cfg, norm, union, state: ng.AdamState) -> dict:
    return {
        "config": cfg,
        "config_hash": config_hash(training_identity(cfg)),
        "normalizer": norm.to_json(),
        "union_times": [u.tolist() for u in union],
        "adam": state.to_json(),
        "step": state.step,
    }


def run_training(cfg: dict, data_dir: Path, out: Path, resume: bool = False) -> TrainedRun:
    tcfg = train_cfg(cfg)
    ckpt = out / "checkpoint.json"
    history_path = out / "history.csv"
    train_raw = _load_split(data_dir, "train")
    if not train_raw:
        raise dt.DataError(f"{data_dir}/train.jsonl holds no series")
    if resume:
        run = TrainedRun(out)
        run.check(cfg)
        norm = run.normalizer
        model = run.model
        state = ng.AdamState.from_json(run.meta["adam"])
        log.info("resuming from step %d", state.step)
    else:
        norm = dt.fit_normalizer(train_raw, trim=0.001)
        train_n = dt.apply_normalizer(train_raw, norm)
        model = HeTVAE(model_cfg(cfg), dt.union_times(train_n), seed=tcfg.seed)
        state = ng.AdamState.fresh(model.params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
        ob.write_history(history_path, [])
    train_n = dt.apply_normalizer(train_raw, norm)

    def save(m: HeTVAE, st: ng.AdamState, hist) -> None:
        ng.save_checkpoint(ckpt, m.params, _checkpoint_meta(cfg, norm, m.union_times, st))

    def on_step(r: ob.LossReport) -> None:
        ob.write_history(history_path, [r], append=True)
        if r.iteration % 100 == 0:
            log.info("iter %d total %.4f nll %.4f kl %.4f mse %.4f", r.iteration, r.total, r.nll_term, r.kl_term, r.mse_term)

    state, _ = ob.train(model, train_n, tcfg, state=state, on_checkpoint=save, on_step=on_step)
    save(model, state, None)
    _write_json(out / "normalizer.json", norm.to_json())
    return TrainedRun(out)


def run_evaluation(run: TrainedRun, cfg: dict, data_dir: Path, jobs: int) -> dict:
    test = dt.apply_normalizer(_load_split(data_dir, "test"), run.normalizer)
    e = cfg["eval"]
    seeds = [int(cfg["seed"]) + i for i in range(int(e["n_seeds"]))]
    if not seeds:
        raise ConfigError("eval.n_seeds must be at least 1")
    reports = [
        ev.evaluate(run.model, test, fraction=e["fraction"], n_samples=e["n_samples"], seed=s, chunk=e["chunk"], jobs=jobs)
        for s in seeds
    ]
    combined = ev.combine_reports(reports)
    return {"report": combined.to_json(), "per_seed": [r.to_json() for r in reports]}


# ---------------------------------------------------------------------------
# commands


def common(fn):
    fn = click.option("--jobs", type=int, default=1, show_default=True, help="Worker threads for per-case evaluation.")(fn)
    fn = click.option("--force", is_flag=True, help="Overwrite existing outputs.")(fn)
    fn = click.option("--out", "out", type=click.Path(file_okay=False), required=True, help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed (overrides the config file).")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override one config entry.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON config file.")(fn)
    return fn


def _setup(config_path, overrides, seed) -> dict:
    cfg = resolve_config(config_path, overrides, seed)
    log.info("resolved config %s: %s", config_hash(cfg), json.dumps(cfg, sort_keys=True))
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Heteroscedastic temporal VAE for irregularly sampled time series."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command()
@common
def generate(config_path, overrides, seed, out, force, jobs):
    """Write the synthetic train/val/test JSONL files and a split manifest."""
    cfg = _setup(config_path, overrides, seed)
    out = Path(out)
    files = [f"{s}.jsonl" for s in SPLITS] + [f"{s}_dense.jsonl" for s in SPLITS] + ["manifest.json"]
    _prepare_out(out, files, force)
    sparse, dense = dt.make_synthetic_dataset(synthetic_cfg(cfg))
    idx = dt.split_indices(len(sparse), int(cfg["seed"]))
    for split in SPLITS:
        dt.write_dataset([sparse[i] for i in idx[split]], out / f"{split}.jsonl")
        dt.write_dataset([dense[i] for i in idx[split]], out / f"{split}_dense.jsonl")
    manifest = {
        "seed": cfg["seed"],
        "counts": {s: len(idx[s]) for s in SPLITS},
        "ids": {s: [sparse[i].id for i in idx[s]] for s in SPLITS},
        "rounding": "n_test = floor(0.2 n + 0.5); n_val = floor(0.2 (n - n_test) + 0.5); n_train = rest",
        "config": cfg,
        "config_hash": config_hash(cfg),
    }
    _write_json(out / "manifest.json", manifest)
    click.echo(json.dumps(manifest["counts"]))


@cli.command()
@common
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True, help="Directory with train.jsonl.")
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in --out up to train.iterations.")
def train(config_path, overrides, seed, out, force, jobs, data_dir, resume):
    """Fit the normalizer on the training split and train a model."""
    cfg = _setup(config_path, overrides, seed)
    out = Path(out)
    if not resume:
        _prepare_out(out, ["checkpoint.json", "history.csv"], force)
    run = run_training(cfg, Path(data_dir), out, resume=resume)
    click.echo(f"step {run.meta['step']} checkpoint {out / 'checkpoint.json'}")


@cli.command()
@common
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True, help="Training output directory.")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True, help="Directory with test.jsonl.")
def evaluate(config_path, overrides, seed, out, force, jobs, run_dir, data_dir):
    """Score a trained model on the test split over several evaluation seeds."""
    run = TrainedRun(Path(run_dir))
    cfg = _setup(config_path, overrides, seed) if (config_path or overrides or seed is not None) else run.config
    run.check(cfg)
    out = Path(out)
    _prepare_out(out, ["eval.json"], force)
    result = run_evaluation(run, cfg, Path(data_dir), jobs)
    result["config"] = cfg
    result["config_hash"] = config_hash(cfg)
    _write_json(out / "eval.json", result)
    click.echo(json.dumps(result["report"], sort_keys=True))


@cli.command()
@common
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True, help="Training output directory.")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True, help="Dataset directory.")
@click.option("--ids", default=None, help="Comma-separated case ids (default: interpolate.ids).")
@click.option("--sizes", default=None, help="Comma-separated conditioning sizes (default: interpolate.sizes).")
def interpolate(config_path, overrides, seed, out, force, jobs, run_dir, data_dir, ids, sizes):
    """Write mixture mean/std traces on a uniform grid, one CSV per (case, size)."""
    run = TrainedRun(Path(run_dir))
    cfg = _setup(config_path, overrides, seed) if (config_path or overrides or seed is not None) else run.config
    run.check(cfg)
    icfg = cfg["interpolate"]
    id_list = [s for s in ids.split(",") if s] if ids is not None else list(icfg["ids"])
    size_list = [int(s) for s in sizes.split(",") if s] if sizes is not None else [int(s) for s in icfg["sizes"]]
    data_dir = Path(data_dir)
    split = icfg["split"]
    dense_path = data_dir / f"{split}_dense.jsonl"
    source = dt.read_dataset(dense_path if dense_path.exists() else data_dir / f"{split}.jsonl")
    by_id = {s.id: s for s in source}
    unknown = [i for i in id_list if i not in by_id]
    if unknown:
        raise dt.DataError(f"unknown case ids {unknown}; available: {sorted(by_id)}")
    norm = run.normalizer
    grid = np.linspace(0.0, 1.0, int(icfg["grid"]))
    out = Path(out)
    names = [f"trace_{i}_{n}.csv" for i in id_list for n in size_list]
    _prepare_out(out, names + ["traces.json"], force)
    for case_id in id_list:
        series = by_id[case_id]
        series_n = dt.apply_normalizer([series], norm)[0]
        for size in size_list:
            if not 1 <= size <= series_n.n_obs:
                raise dt.DataError(f"case {case_id!r} has {series_n.n_obs} observations, cannot condition on {size}")
            cond = dt.take_subset(series_n, size, stream(int(cfg["seed"]), 300, ev.case_key(case_id), size))
            tr = ev.interpolation_trace(run.model, cond, grid, int(icfg["n_samples"]), int(cfg["seed"]))
            tr = ev.InterpolationTrace(grid * norm.t_span + norm.t_min, tr.mean * norm.std + norm.mean, tr.std * norm.std)
            (out / f"trace_{case_id}_{size}.csv").write_text(tr.to_csv())
    _write_json(out / "traces.json", {"files": names, "config": cfg, "config_hash": config_hash(cfg)})
    click.echo(f"wrote {len(names)} traces to {out}")


def parse_ablations(names) -> list[str]:
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation(s) {bad}; valid names: {list(ABLATIONS)}")
    return list(names)


def ablation_config(cfg: dict, name: str) -> dict:
    out = copy.deepcopy(cfg)
    for key, val in ABLATIONS[name].items():
        section = "train" if key == "alo" else "model"
        out[section][key] = val
    return out


@cli.command()
@common
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True, help="Dataset directory.")
@click.option("--names", default=None, help="Comma-separated ablation names (default: ablate.names).")
def ablate(config_path, overrides, seed, out, force, jobs, data_dir, names):
    """Train and evaluate each named ablation; write ablation.json and ablation.csv."""
    cfg = _setup(config_path, overrides, seed)
    chosen = parse_ablations([n for n in names.split(",") if n] if names is not None else cfg["ablate"]["names"])
    out = Path(out)
    _prepare_out(out, ["ablation.json", "ablation.csv"] + chosen, force)
    rows = []
    for name in chosen:
        sub = ablation_config(cfg, name)
        run_dir = out / name
        run_dir.mkdir(parents=True, exist_ok=True)
        run = run_training(sub, Path(data_dir), run_dir)
        result = run_evaluation(run, sub, Path(data_dir), jobs)
        rows.append({"name": name, **result["report"]})
        log.info("%s: nll %.4f", name, result["report"]["nll"])
    _write_json(out / "ablation.json", {"rows": rows, "config": cfg, "config_hash": config_hash(cfg)})
    cols = ["name", "nll", "nll_std", "mae", "mae_std", "mse", "mse_std", "n_targets"]
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    click.echo((out / "ablation.csv").read_text(), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except dt.DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (ob.NumericalError, ng.NumgradError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC
    return 0


def entry() -> None:
    sys.exit(main())
