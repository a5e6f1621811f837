"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage error, 3 I/O or format error.
Settings resolve as command-line flag, then ``--config`` file (flat
``key = value`` lines), then built-in default. ``TIMOTION_SEED`` replaces the
default seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, checks
from .data import SCENARIOS, generate_dataset, generate_synthetic_pair, load_dataset, save_dataset, skeleton_for
from .denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint
from .diffusion import SamplerConfig, cosine_schedule, inbetween_sample, sample_batch
from .errors import ConfigurationError, DimensionError, FormatError, UsageError
from .seeding import default_seed
from .train import TrainConfig, train, write_loss_csv

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

# per-command settings: name -> (type, default)
COMMANDS: dict[str, dict[str, tuple]] = {
    "gen-data": {
        "scenario": (str, "all"),
        "count": (int, 200),
        "length": (int, 32),
        "joints": (int, 5),
        "seed": (int, None),
        "out": (str, "data/train.timd"),
    },
    "train": {
        "dataset": (str, "data/train.timd"),
        "steps": (int, 2000),
        "backend": (str, "rwkv"),
        "temporal": (str, "res"),
        "lpa": (bool, True),
        "width": (int, 64),
        "blocks": (int, 2),
        "heads": (int, 4),
        "batch_size": (int, 8),
        "lr": (float, 1e-3),
        "diffusion_steps": (int, 1000),
        "seed": (int, None),
        "out": (str, "runs/model"),
    },
    "sample": {
        "checkpoint": (str, "runs/model/model.ckpt"),
        "tokens": (str, "1,2,3"),
        "length": (int, 32),
        "count": (int, 1),
        "steps": (int, 50),
        "guidance": (float, 3.5),
        "eta": (float, 0.0),
        "diffusion_steps": (int, 1000),
        "seed": (int, None),
        "out": (str, "runs/sample.timd"),
    },
    "inbetween": {
        "checkpoint": (str, "runs/model/model.ckpt"),
        "dataset": (str, "data/train.timd"),
        "index": (int, 0),
        "alpha": (float, 0.1),
        "steps": (int, 50),
        "guidance": (float, 3.5),
        "shared_noise": (bool, True),
        "diffusion_steps": (int, 1000),
        "seed": (int, None),
        "out": (str, "runs/inbetween.timd"),
    },
    "gradcheck": {"seed": (int, None), "only": (str, "")},
    "gradnorm": {
        "length": (int, 8),
        "dim": (int, 16),
        "trials": (int, 500),
        "orthonormal": (bool, False),
        "threshold": (float, 0.9),
        "seed": (int, None),
        "out": (str, ""),
    },
    "spectrum": {
        "checkpoint": (str, "runs/model/model.ckpt"),
        "count": (int, 50),
        "length": (int, 32),
        "steps": (int, 20),
        "guidance": (float, 3.5),
        "cutoff": (float, 0.5),
        "diffusion_steps": (int, 1000),
        "seed": (int, None),
        "out": (str, ""),
    },
    "params": {
        "width": (int, 128),
        "blocks": (int, 2),
        "backend": (str, "rwkv"),
        "heads": (int, 4),
        "joints": (int, 5),
    },
}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_settings(command: str, flags: dict, file_values: dict[str, str]) -> dict:
    spec = COMMANDS[command]
    unknown = set(file_values) - set(spec)
    if unknown:
        raise UsageError(f"unknown settings for {command}: {sorted(unknown)}")
    out = {}
    for key, (kind, default) in spec.items():
        if flags.get(key) is not None:
            value = flags[key]
        elif key in file_values:
            value = file_values[key]
        else:
            value = default
        if key == "seed" and value is None:
            value = default_seed()
        if value is not None:
            try:
                value = _parse_bool(value) if kind is bool else kind(value)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {value!r}") from exc
        out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timotion", description="Two-person motion diffusion toolkit.")
    parser.add_argument("--config", help="key = value settings file")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, settings in COMMANDS.items():
        p = sub.add_parser(name)
        for key, (kind, _) in settings.items():
            flag = "--" + key.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, dest=key, type=str, default=None, metavar="BOOL")
            else:
                p.add_argument(flag, dest=key, type=kind, default=None)
    return parser


def _tokens(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError as exc:
        raise UsageError(f"tokens must be comma-separated integers, got {text!r}") from exc


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(s: dict) -> int:
    spec = skeleton_for(s["joints"])
    if s["count"] < 0:
        raise UsageError("count must be >= 0")
    if s["scenario"] == "all":
        scenarios = SCENARIOS
    elif s["scenario"] in SCENARIOS:
        scenarios = (s["scenario"],)
    else:
        raise UsageError(f"unknown scenario {s['scenario']!r}")
    pairs = generate_dataset(spec, s["count"], s["length"], s["seed"], scenarios)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, pairs, spec.n_joints, manifest={"scenarios": list(scenarios), "seed": s["seed"], "length": s["length"]})
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train(s: dict) -> int:
    pairs, n_joints = load_dataset(s["dataset"])
    spec = skeleton_for(n_joints)
    length = pairs[0].length if pairs else 32
    config = DenoiserConfig(
        n_joints=n_joints, width=s["width"], n_blocks=s["blocks"], backend=s["backend"], heads=s["heads"],
        temporal=s["temporal"], use_lpa=s["lpa"], max_len=max(length, 1),
    )
    model = Denoiser(config, s["seed"])
    tcfg = TrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"], seed=s["seed"])
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    history = train(model, pairs, spec, cosine_schedule(s["diffusion_steps"]), tcfg)
    save_checkpoint(out / "model.ckpt", model, s["steps"])
    write_loss_csv(out / "loss.csv", history)
    if history:
        print(f"step {history[-1].step}: loss {history[-1].total:.5f}")
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def _sampler(s: dict) -> SamplerConfig:
    return SamplerConfig(steps=s["steps"], eta=s.get("eta", 0.0), guidance=s["guidance"], seed=s["seed"], shared_noise=s.get("shared_noise", True))


def _check_vocab(model: Denoiser, tokens) -> None:
    bad = [t for t in tokens if not 0 <= t < model.config.vocab_size]
    if bad:
        raise UsageError(f"tokens {bad} outside the checkpoint vocabulary of size {model.config.vocab_size}")


def cmd_sample(s: dict) -> int:
    model, _ = load_checkpoint(s["checkpoint"])
    tokens = _tokens(s["tokens"])
    _check_vocab(model, tokens)
    sampler = _sampler(s)
    pairs = sample_batch(model, cosine_schedule(s["diffusion_steps"]), [tokens] * s["count"], s["length"], sampler)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, pairs, model.config.n_joints, manifest={"seed": s["seed"], "steps": s["steps"], "guidance": s["guidance"], "eta": s["eta"], "tokens": list(tokens)})
    print(f"wrote {len(pairs)} samples to {out}")
    return EXIT_OK


def cmd_inbetween(s: dict) -> int:
    model, _ = load_checkpoint(s["checkpoint"])
    pairs, n_joints = load_dataset(s["dataset"])
    if n_joints != model.config.n_joints:
        raise DimensionError(f"dataset has {n_joints} joints, checkpoint expects {model.config.n_joints}")
    if not 0 <= s["index"] < len(pairs):
        raise UsageError(f"index {s['index']} outside dataset of {len(pairs)} pairs")
    gt = pairs[s["index"]]
    _check_vocab(model, gt.tokens)
    result = inbetween_sample(model, cosine_schedule(s["diffusion_steps"]), gt, s["alpha"], _sampler(s))
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, [result], n_joints, gt.frame_rate, manifest={"seed": s["seed"], "steps": s["steps"], "alpha": s["alpha"], "index": s["index"], "tokens": list(gt.tokens)})
    print(f"wrote in-betweened pair to {out}")
    return EXIT_OK


def cmd_gradcheck(s: dict) -> int:
    names = [n for n in s["only"].split(",") if n] or None
    failed = 0
    for check, err in checks.run_all(s["seed"], names):
        ok = err <= check.tolerance
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {check.name:40s} {err:.3e} (tol {check.tolerance:.0e})")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_gradnorm(s: dict) -> int:
    report = analysis.gradient_norm_experiment(s["length"], s["dim"], s["trials"], s["seed"], s["orthonormal"])
    print(f"fraction(II > I) = {report.fraction:.3f} over {report.trials} trials; mean ratio {report.mean_ratio:.3f}")
    if s["out"]:
        analysis.write_gradnorm_csv(s["out"], report)
        _write_json(Path(s["out"] + ".json"), report.to_dict())
    return EXIT_OK if report.fraction >= s["threshold"] else EXIT_CHECK


def cmd_spectrum(s: dict) -> int:
    model, _ = load_checkpoint(s["checkpoint"])
    spec = skeleton_for(model.config.n_joints)
    if s["length"] > model.config.max_len:
        raise UsageError(f"length {s['length']} exceeds the model's max_len {model.config.max_len}")
    # one text prompt per scenario, cycled
    scenario_tokens = [generate_synthetic_pair(spec, sc, 8, 0).tokens for sc in SCENARIOS]
    tokens = [scenario_tokens[i % len(scenario_tokens)] for i in range(s["count"])]
    samples = sample_batch(model, cosine_schedule(s["diffusion_steps"]), tokens, s["length"], _sampler({**s, "eta": 0.0}))
    features = analysis.model_features(model, samples)
    value = analysis.mean_high_frequency(features, s["cutoff"])
    print(f"mean high-frequency proportion = {value:.4f} over {len(features)} feature maps (cutoff {s['cutoff']})")
    if s["out"]:
        analysis.write_spectrum_csv(s["out"], analysis.spectrum_analysis(features[0], s["cutoff"]))
        _write_json(Path(s["out"] + ".json"), {"proportion": value, "count": s["count"], "cutoff": s["cutoff"], "seed": s["seed"]})
    return EXIT_OK


def cmd_params(s: dict) -> int:
    base = DenoiserConfig(n_joints=s["joints"], n_blocks=s["blocks"], backend=s["backend"], heads=s["heads"])
    rows = dict(analysis.compare_schemes(base, s["width"]))
    for name, count in rows.items():
        print(f"{name:14s} {count:>12,d}")
    ok = rows["separate"] > rows["cii"] > rows["cii+res"] and rows["cii+res+lpa"] > rows["cii+res"]
    print("trend separate > cii > cii+res < cii+res+lpa:", "holds" if ok else "VIOLATED")
    return EXIT_OK if ok else EXIT_CHECK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "inbetween": cmd_inbetween,
    "gradcheck": cmd_gradcheck,
    "gradnorm": cmd_gradnorm,
    "spectrum": cmd_spectrum,
    "params": cmd_params,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        settings = resolve_settings(args.command, flags, file_values)
        return HANDLERS[args.command](settings)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
