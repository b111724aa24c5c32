"""Command-line entry point: gen-data, train, sample, evaluate, uq, theory-check.

Every command reads one JSON config and writes only under its output
directory. Exit codes: 0 success, 1 rejected input, 2 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_dataclass, load_config
from .data import Dataset, Normalization, load_dataset, model_inputs, training_arrays, write_dataset
from .diffusion import Denoiser, load_checkpoint, save_checkpoint, train, write_loss_csv
from .errors import RejectedInputError, UndefinedScoreError
from .experiments import METHODS, ModelSpec, clip_consistency, guidance_model
from .fields import read_mpf, write_mpf, write_pgm
from .fluidsim import gen_fluid_dataset
from .metrics import MetricReport, mse, psnr, ssim
from .sampler import sample_ensemble, sample_guided
from .theory import run_theory_checks
from .thermal import gen_thermal_dataset


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_manifest(path, cfg: ExperimentConfig, stage: str, inputs, outputs, timings: dict, extra=None) -> None:
    """Config hash, code version, timings and sha256 digests of inputs and outputs."""
    path = Path(path)
    root = path.parent

    def digests(paths):
        out = {}
        for p in paths:
            p = Path(p)
            key = str(p.relative_to(root)) if p.is_relative_to(root) else str(p)
            out[key] = file_digest(p)
        return dict(sorted(out.items()))

    _json_dump(path, {"stage": stage, "config_sha256": cfg.digest(), "code_version": _code_version(),
                      "timings_s": timings, "inputs": digests(inputs), "outputs": digests(outputs),
                      **(extra or {})})


def _preview(path, arr) -> None:
    """PGM of the channels laid side by side."""
    arr = np.asarray(arr)
    write_pgm(path, np.concatenate(list(arr.reshape((-1,) + arr.shape[-2:])), axis=1))


def _method_tag(use_c1: bool, choice: int) -> str:
    if choice == 2:
        return "c2"
    return "c1" if use_c1 else "s-ddim"


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(cfg: ExperimentConfig, out=None) -> Path:
    root = Path(out) if out else cfg.data_path
    t0 = time.perf_counter()
    if cfg.kind == "fluid":
        items = ((rid, split, init.to_dict(), rec)
                 for rid, split, init, rec in gen_fluid_dataset(cfg.fluid_data, cfg.fluid_solver))
        spec = {"data": asdict(cfg.fluid_data), "solver": asdict(cfg.fluid_solver)}
    elif cfg.kind == "thermal":
        items = gen_thermal_dataset(cfg.thermal_data)
        spec = cfg.thermal_data.to_dict()
    else:
        raise RejectedInputError(f"gen-data has nothing to generate for kind {cfg.kind!r}")
    index = write_dataset(root, cfg.kind, spec, items)
    entries = json.loads(index.read_text())["records"]
    outputs = [index] + [root / rel for e in entries for rel in e["files"].values()]
    write_manifest(root / "manifest.json", cfg, "gen-data", [], outputs,
                   {"generate": time.perf_counter() - t0})
    n_test = sum(e["split"] == "test" for e in entries)
    print(f"wrote {len(entries)} records ({len(entries) - n_test} train, {n_test} test) to {root}")
    return root


# ------------------------------------------------------------------ train


def _load(cfg: ExperimentConfig) -> Dataset:
    if not (cfg.data_path / "index.json").exists():
        raise FileNotFoundError(f"no dataset at {cfg.data_path}; run gen-data first")
    return load_dataset(cfg.data_path)


def cmd_train(cfg: ExperimentConfig, checkpoint=None, unconditioned: bool = False, out=None) -> Path:
    ds = _load(cfg)
    use_c1 = not unconditioned
    tag = _method_tag(use_c1, 1)
    out = Path(out) if out else cfg.out_path / f"train-{tag}"
    inputs = [cfg.data_path / "index.json"]
    if checkpoint:
        den, meta, adam = load_checkpoint(checkpoint)
        if meta.get("use_c1") != use_c1:
            raise RejectedInputError("checkpoint conditioning does not match the requested run")
        norm = Normalization.from_dict(meta["normalization"])
        model = build_dataclass(ModelSpec, meta["model"], "checkpoint.model")
        inputs.append(Path(checkpoint))
    else:
        norm = ds.normalization()
        model = cfg.model
        den = adam = None
    # a resumed run adds cfg.train's steps and keeps its seed, so batches continue where they stopped
    tcfg = cfg.train
    data = training_arrays(ds.split("train"), norm, use_c1)
    if den is None:
        arch = data.architecture(widths=model.widths, time_dim=model.time_dim, time_hidden=model.time_hidden)
        den = Denoiser.initialize(arch, tcfg.seed if tcfg.init_seed is None else tcfg.init_seed)
    first = 0 if adam is None else adam.step
    t0 = time.perf_counter()
    res = train(data, model.schedule(), tcfg, denoiser=den, adam=adam)
    elapsed = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    meta = {"kind": ds.kind, "use_c1": use_c1, "method": tag, "normalization": norm.to_dict(),
            "model": asdict(model), "train": asdict(tcfg), "schedule": model.schedule().spec(),
            "steps": res.adam.step}
    save_checkpoint(out / "checkpoint.mpd", res.denoiser, meta, res.adam)
    write_loss_csv(out / "loss.csv", res.losses, first_step=first)
    write_manifest(out / "manifest.json", cfg, "train", inputs, [out / "checkpoint.mpd", out / "loss.csv"],
                   {"train": elapsed})
    print(f"trained {tag} denoiser for {len(res.losses)} steps (through step {res.adam.step}); "
          f"final loss {res.losses[-1]:.4g}; checkpoint {out / 'checkpoint.mpd'}")
    return out / "checkpoint.mpd"


# ------------------------------------------------------------------ sample / uq


def _sampling_setup(cfg: ExperimentConfig, checkpoint, choice: int, ids):
    if choice not in (1, 2):
        raise RejectedInputError(f"choice must be 1 or 2, got {choice}")
    ds = _load(cfg)
    den, meta, _ = load_checkpoint(checkpoint)
    norm = Normalization.from_dict(meta["normalization"])
    model = build_dataclass(ModelSpec, meta["model"], "checkpoint.model")
    records = ds.by_id(ids) if ids else ds.split("test")
    if not records:
        raise RejectedInputError("no records selected")
    guidance = None
    if choice == 2:
        for r in records:
            r.require_c2()
        guidance = guidance_model(records, norm, cfg.guidance)
    return ds, den, meta, norm, model.schedule(), records, guidance


def _guidance_kw(cfg: ExperimentConfig, choice: int) -> dict:
    return {"weight": cfg.guidance.weight, "clip_norm": cfg.guidance.clip_norm} if choice == 2 else {}


def cmd_sample(cfg: ExperimentConfig, checkpoint, choice: int = 1, ids=None, out=None,
               trajectory: bool = False) -> list[Path]:
    ds, den, meta, norm, sched, records, guidance = _sampling_setup(cfg, checkpoint, choice, ids)
    tag = _method_tag(meta["use_c1"], choice)
    out = Path(out) if out else cfg.out_path / "samples"
    out.mkdir(parents=True, exist_ok=True)
    context, cond = model_inputs(records, norm, meta["use_c1"])
    t0 = time.perf_counter()
    run = sample_guided(den, context, cond, guidance, sched, cfg.sample_seed, keep_trajectory=trajectory,
                        **_guidance_kw(cfg, choice))
    elapsed = time.perf_counter() - t0
    phys = norm.state.invert(run.sample)
    written = []
    for i, (r, x) in enumerate(zip(records, phys)):
        path = out / f"{r.id}.{tag}.mpf"
        write_mpf(path, x)
        _preview(out / f"{r.id}.{tag}.pgm", x)
        written += [path, out / f"{r.id}.{tag}.pgm"]
        if trajectory:
            steps = norm.state.invert(np.stack([s[i] for s in run.trajectory]))
            write_mpf(out / f"{r.id}.{tag}.trajectory.mpf", steps.reshape((-1,) + steps.shape[-2:]))
            written.append(out / f"{r.id}.{tag}.trajectory.mpf")
    extra = {"seed": cfg.sample_seed, "choice": choice, "method": tag, "ids": [r.id for r in records],
             "schedule": sched.spec(),
             "guidance": asdict(cfg.guidance) if choice == 2 else None}
    write_manifest(out / f"manifest.sample-{tag}.json", cfg, "sample", [Path(checkpoint)], written,
                   {"sample": elapsed}, extra)
    print(f"sampled {len(records)} records with method {tag} into {out}")
    return written


def cmd_uq(cfg: ExperimentConfig, checkpoint, choice: int = 1, ids=None, out=None) -> dict:
    ids = ids[:1] if ids else None
    ds, den, meta, norm, sched, records, guidance = _sampling_setup(cfg, checkpoint, choice, ids)
    record = records[0]
    tag = _method_tag(meta["use_c1"], choice)
    out = Path(out) if out else cfg.out_path / "uq"
    out.mkdir(parents=True, exist_ok=True)
    context, cond = model_inputs([record], norm, meta["use_c1"])
    t0 = time.perf_counter()
    _, _, samples = sample_ensemble(cfg.ensemble_size, den, context, cond, sched, cfg.sample_seed,
                                    model=guidance, **_guidance_kw(cfg, choice))
    elapsed = time.perf_counter() - t0
    # statistics of the f32 values actually written, so they can be recomputed from the file
    phys = norm.state.invert(samples).astype(np.float32).astype(np.float64)
    mean, std = phys.mean(axis=0), phys.std(axis=0)
    stem = out / f"{record.id}.{tag}"
    paths = {}
    for name, arr in (("mean", mean), ("std", std)):
        paths[name] = Path(f"{stem}.{name}.mpf")
        write_mpf(paths[name], arr)
        _preview(f"{stem}.{name}.pgm", arr)
    paths["ensemble"] = Path(f"{stem}.ensemble.mpf")
    write_mpf(paths["ensemble"], phys.reshape((-1,) + phys.shape[-2:]))
    outputs = list(paths.values()) + [Path(f"{stem}.mean.pgm"), Path(f"{stem}.std.pgm")]
    summary = {"id": record.id, "method": tag, "ensemble_size": cfg.ensemble_size, "seed": cfg.sample_seed,
               "mean_std": float(std.mean())}
    write_manifest(out / f"manifest.uq-{record.id}.{tag}.json", cfg, "uq", [Path(checkpoint)], outputs,
                   {"ensemble": elapsed}, summary)
    print(f"ensemble of {cfg.ensemble_size} for {record.id} ({tag}): mean per-cell std {std.mean():.4g}")
    return summary


# ------------------------------------------------------------------ evaluate


def _sample_files(samples: Path) -> dict[str, dict[str, Path]]:
    """``{tag: {id: path}}`` for files named ``<id>.<tag>.mpf``."""
    found: dict[str, dict[str, Path]] = {}
    for p in sorted(samples.glob("*.mpf")):
        parts = p.name[:-len(".mpf")].split(".")
        if len(parts) == 2 and parts[1] in METHODS:
            found.setdefault(parts[1], {})[parts[0]] = p
    return found


def _scores(ds: Dataset, norm: Normalization, record, x) -> dict:
    truth = record.target
    unit = lambda f: (norm.state.apply(f) + 1.0) / 2.0  # noqa: E731
    row = {"mse": mse(x, truth), "psnr": psnr(unit(x), unit(truth)), "ssim": ssim(unit(x), unit(truth))}
    if ds.kind == "thermal":
        try:
            row["consistency"] = clip_consistency(x, record)
        except UndefinedScoreError:
            row["consistency"] = float("nan")
    return row


def cmd_evaluate(cfg: ExperimentConfig, samples=None, out=None) -> dict:
    ds = _load(cfg)
    samples = Path(samples) if samples else cfg.out_path / "samples"
    out = Path(out) if out else cfg.out_path / "reports"
    found = _sample_files(samples)
    if not found:
        raise RejectedInputError(f"no <id>.<method>.mpf sample files in {samples}")
    norm = ds.normalization()
    out.mkdir(parents=True, exist_ok=True)
    metric = "consistency" if ds.kind == "thermal" else "mse"
    means = {}
    written = []
    for tag in sorted(found):
        records = ds.by_id(sorted(found[tag]))
        report = MetricReport()
        for r in records:
            x = read_mpf(found[tag][r.id])
            if x.size != r.target.size:
                raise RejectedInputError(f"sample {r.id}.{tag} has {x.size} values, target has {r.target.size}")
            report.add(r.id, **_scores(ds, norm, r, x.reshape(r.target.shape)))
        report.write_csv(out / f"report.{tag}.csv")
        report.write_json(out / f"report.{tag}.json")
        written += [out / f"report.{tag}.csv", out / f"report.{tag}.json"]
        means[tag] = report.aggregate(metric)[0]
    present = [m for m in ("c2", "c1", "s-ddim") if m in means]
    ordered = all(means[a] <= means[b] for a, b in zip(present, present[1:]))
    summary = {"metric": metric, "means": means, "order": present, "ordered": ordered}
    _json_dump(out / "ordering.json", summary)
    written.append(out / "ordering.json")
    inputs = [p for tag in found.values() for p in tag.values()]
    write_manifest(out / "manifest.json", cfg, "evaluate", inputs, written, {})
    print(f"{metric} means: " + ", ".join(f"{k} {v:.4g}" for k, v in means.items())
          + f"; ordered {' <= '.join(present)}: {ordered}")
    return summary


# ------------------------------------------------------------------ theory-check


def cmd_theory_check(cfg: ExperimentConfig, out=None) -> dict:
    out = Path(out) if out else cfg.out_path / "theory"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = run_theory_checks(cfg.theory.chains, cfg.theory.seed, cfg.theory.threshold)
    elapsed = time.perf_counter() - t0
    rows = []
    for res in results:
        exact = "scale=1)" in res.name
        rows.append({**res.to_dict(), "choice": 2 if res.name.startswith("posterior") else 1,
                     "expect_pass": exact, "as_expected": res.passed == exact})
        print(f"{res.name}: W2 {res.w2:.4f} vs {res.threshold} -> {'pass' if res.passed else 'fail'}"
              f" ({'expected' if res.passed == exact else 'UNEXPECTED'})")
    report = {"checks": rows, "all_as_expected": all(r["as_expected"] for r in rows)}
    _json_dump(out / "theory.json", report)
    write_manifest(out / "manifest.json", cfg, "theory-check", [], [out / "theory.json"], {"checks": elapsed})
    return report


# ------------------------------------------------------------------ entry point


def _ids(text: str | None):
    return [s for s in text.split(",") if s] if text else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output directory (defaults under the config's out_dir)")
        return p

    command("gen-data", "generate a fluid or thermal dataset")
    p = command("train", "train a denoiser on the dataset's training split")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--unconditioned", action="store_true", help="train without the cheap simulation input")
    for name, help_text in (("sample", "sample test records"), ("uq", "ensemble mean and std for one record")):
        p = command(name, help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--choice", type=int, choices=(1, 2), default=1,
                       help="1: denoiser only, 2: add guidance from the expensive simulation")
        p.add_argument("--ids", help="comma-separated record ids (default: the test split)")
        if name == "sample":
            p.add_argument("--trajectory", action="store_true", help="also dump every reverse step")
    p = command("evaluate", "score samples against ground truth")
    p.add_argument("--samples", help="directory of <id>.<method>.mpf files")
    command("theory-check", "analytic-score sampler checks")
    return parser


def run(args) -> None:
    cfg = load_config(args.config)
    if args.command == "gen-data":
        cmd_gen_data(cfg, args.out)
    elif args.command == "train":
        cmd_train(cfg, args.checkpoint, args.unconditioned, args.out)
    elif args.command == "sample":
        cmd_sample(cfg, args.checkpoint, args.choice, _ids(args.ids), args.out, args.trajectory)
    elif args.command == "uq":
        cmd_uq(cfg, args.checkpoint, args.choice, _ids(args.ids), args.out)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.samples, args.out)
    elif args.command == "theory-check":
        cmd_theory_check(cfg, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except RejectedInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


__all__ = ["build_parser", "cmd_evaluate", "cmd_gen_data", "cmd_sample", "cmd_theory_check", "cmd_train",
           "cmd_uq", "file_digest", "main", "write_manifest"]
