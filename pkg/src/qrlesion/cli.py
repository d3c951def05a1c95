"""Command-line driver.

    qrlesion simulate|train|calibrate|detect|eval --config FILE --out DIR [--seed N]

Each command reads a flat ``key = value`` config, writes its artifacts to
``--out`` together with the resolved config (``config.txt``) and a
``summary.json`` whose ``generated_at`` field is the only non-deterministic
byte in the output.  Exit codes: 0 success, 1 runtime failure, 2 usage or
config error.  ``QTN_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import anomaly, bqr, conformal, fileio, metrics, simdata, vae
from .fileio import ConfigError, FormatError

COMMANDS = ("simulate", "train", "calibrate", "detect", "eval")
TRAIN_MODES = ("vae", "qrvae", "bqr")

SCHEMAS = {
    "simulate": {
        "seed": (int, 0),
        "dataset": (str, "lesions"),  # lesions | moons
        "n": (int, 64),
        "noise_std": (float, 0.05),
        "shared_eps": (bool, False),
        "size": (int, 32),
        "image_noise_std": (float, 0.03),
        "lesion_p": (float, 0.0),
        "lesion_radius": (tuple, (2.5, 5.0)),
        "lesion_contrast": (tuple, (0.35, 0.55)),
        "raters": (tuple, ()),  # signed morphology radii, one per rater
        "flip_p": (float, 0.0),
    },
    "train": {
        "seed": (int, 0),
        "mode": (str, ""),
        "data": (str, ""),
        "init_model": (str, ""),
        "epochs": (int, 10),
        "batch_size": (int, 32),
        "lr": (float, 1e-3),
        "kl_weight": (float, 1.0),
        "latent_dim": (int, 16),
        "hidden": (tuple, (64.0, 64.0)),
        "channels": (tuple, (16.0, 32.0)),
        "alpha_lo": (float, 0.15),
        "alpha_hi": (float, 0.5),
        "levels": (tuple, bqr.DEFAULT_LEVELS),
        "warmup_epochs": (int, 1),
    },
    "calibrate": {
        "seed": (int, 0),
        "alpha": (float, 0.05),
        "scores": (str, ""),
        "model": (str, ""),
        "data": (str, ""),
        "mode": (str, "model_free"),
    },
    "detect": {
        "seed": (int, 0),
        "model": (str, ""),
        "data": (str, ""),
        "mode": (str, "gaussian"),
        "alpha": (float, 0.05),
        "calibration": (str, ""),
        "filter_window": (int, 7),
    },
    "eval": {
        "seed": (int, 0),
        "data": (str, ""),
        "vae_models": (str, ""),
        "pipelines": (str, "gaussian"),
        "alpha": (float, 0.05),
        "filter_window": (int, 7),
        "bqr_model": (str, ""),
        "rater_data": (str, ""),
    },
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _require(cfg, key):
    if not cfg[key]:
        raise ConfigError(f"config key {key!r} is required")
    return cfg[key]


def _check_prob(cfg, key):
    if not 0.0 < cfg[key] < 1.0:
        raise ConfigError(f"{key} must lie in (0, 1), got {cfg[key]}")


def _read_data(path, *needed):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input container {path} does not exist; run `simulate` first")
    recs = fileio.read_container(path)
    missing = [k for k in needed if k not in recs]
    if missing:
        raise FormatError(f"{path} lacks record(s) {missing}")
    return recs


def _model_stem(path):
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".qtn", ".json") else p
    if not stem.with_suffix(".json").exists():
        raise FileNotFoundError(f"model sidecar {stem.with_suffix('.json')} does not exist; "
                                "run `train` first")
    return stem


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _write(out: Path, name, text):
    (out / name).write_text(text)


def _vae_inputs(recs):
    return recs["images"] if "images" in recs else recs["data"]


def _detect_maps(model, heads, i, mode, alpha):
    """Per-image maps for ``anomaly.detect``."""
    mom = vae.head_moments(model, heads)
    mu, sigma = mom[0][i, 0], mom[1][i, 0]
    if mode == "gaussian":
        return anomaly.GaussianMaps(mu, sigma)
    hm = model.head_mode
    if (isinstance(hm, vae.Quantiles) and np.isclose(hm.alpha_lo, alpha / 2)
            and np.isclose(hm.alpha_hi, 1 - alpha / 2)):
        return anomaly.QuantileMaps(heads["L"][i, 0], heads["H"][i, 0], hm.alpha_lo, hm.alpha_hi)
    lo, hi = anomaly.gaussian_interval(anomaly.Moments(mu, sigma, None), alpha)
    return anomaly.QuantileMaps(lo, hi, alpha / 2, 1 - alpha / 2)


def run_detection(model, images, mode, alpha, cal=None, filter_window=7):
    """Detect on a stack of (n, 1, H, W) images; returns a list of results."""
    if mode not in ("gaussian", "model_free"):
        raise ConfigError(f"unknown detection mode {mode!r}")
    heads = vae.reconstruct(model, images)
    out = []
    for i in range(len(images)):
        maps = _detect_maps(model, heads, i, mode, alpha)
        out.append(anomaly.detect(images[i, 0], maps, mode, alpha, use_conformal=cal is not None,
                                  cal=cal, filter_window=filter_window or None))
    return out


def _score_stack(results):
    return np.stack([r.score_map for r in results])


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out: Path):
    if cfg["n"] < 0:
        raise ConfigError("n must be nonnegative")
    manifest = {"dataset": cfg["dataset"], "n": cfg["n"], "seed": cfg["seed"]}
    if cfg["dataset"] == "moons":
        z = simdata.two_moon_latent(simdata.TwoMoonConfig(cfg["n"], cfg["noise_std"], cfg["seed"]))
        rng = simdata.make_rng(np.random.SeedSequence([cfg["seed"], 4]).generate_state(1)[0])
        x = simdata.simulate_4d(z, rng, shared_eps=cfg["shared_eps"])
        recs = {"data": x, "latents": z}
    elif cfg["dataset"] == "lesions":
        try:
            lcfg = simdata.LesionImageConfig(
                n=cfg["n"], size=cfg["size"], noise_std=cfg["image_noise_std"],
                lesion_p=cfg["lesion_p"], lesion_radius=cfg["lesion_radius"],
                lesion_contrast=cfg["lesion_contrast"], seed=cfg["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ds = simdata.synth_lesion_dataset(lcfg)
        recs = {"images": ds.images, "masks": ds.masks.astype(np.float64)}
        if cfg["raters"]:
            rc = simdata.RaterConfig(tuple(int(r) for r in cfg["raters"]), cfg["flip_p"])
            rng = simdata.image_rng(cfg["seed"], -1 % 2**32)
            recs["raters"] = simdata.synth_multirater(ds.masks, rc, rng).astype(np.float64)
        manifest["lesion_fraction"] = float(ds.masks.any(axis=(1, 2)).mean()) if cfg["n"] else 0.0
    else:
        raise ConfigError(f"unknown dataset {cfg['dataset']!r} (moons or lesions)")
    fileio.write_container(out / "data.qtn", recs)
    manifest["records"] = {k: list(v.shape) for k, v in recs.items()}
    fileio.write_json(out / "manifest.json", manifest)
    return {"outputs": ["data.qtn", "manifest.json"]}


def cmd_train(cfg, out: Path):
    mode = cfg["mode"]
    if mode not in TRAIN_MODES:
        raise UsageError(f"train needs --mode {'|'.join(TRAIN_MODES)}, got {mode!r}")
    recs = _read_data(_require(cfg, "data"))
    if mode == "bqr":
        return _train_bqr(cfg, recs, out)
    x = _vae_inputs(recs)
    if cfg["init_model"]:
        model = fileio.load_vae(_model_stem(cfg["init_model"]))
        want = vae.MeanVar if mode == "vae" else vae.Quantiles
        if not isinstance(model.head_mode, want):
            raise ConfigError(f"init_model head mode does not match --mode {mode}")
    else:
        if mode == "vae":
            head = vae.MeanVar()
        else:
            try:
                head = vae.Quantiles(cfg["alpha_lo"], cfg["alpha_hi"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if x.ndim == 2:
            model = vae.mlp_vae(x.shape[1], cfg["latent_dim"], head,
                                tuple(int(h) for h in cfg["hidden"]), seed=cfg["seed"])
        else:
            model = vae.conv_vae(x.shape[1:], cfg["latent_dim"], head,
                                 tuple(int(c) for c in cfg["channels"]), seed=cfg["seed"])
    tcfg = vae.TrainConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["kl_weight"],
                           cfg["seed"])
    trainer = vae.train_vae if mode == "vae" else vae.train_qrvae
    model, hist = trainer(x, model, tcfg)
    fileio.save_vae(out / "model", model)
    cols = ["epoch", "loss", "rec", "kl"]
    _write(out, "history.csv", _csv_text(cols, [[r[c] for c in cols] for r in hist.rows]))
    return {"outputs": ["model.qtn", "model.json", "history.csv"],
            "final_loss": hist.rows[-1]["loss"]}


def _train_bqr(cfg, recs, out):
    if "images" not in recs or "raters" not in recs:
        raise FormatError("bqr training needs 'images' and 'raters' records")
    levels = cfg["levels"]
    if cfg["init_model"]:
        spec, state, meta = fileio.load_network(_model_stem(cfg["init_model"]))
        levels = tuple(meta["levels"])
    else:
        try:
            spec, state = bqr.seg_net(recs["images"].shape[1:], levels,
                                      tuple(int(c) for c in cfg["channels"]), cfg["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    bcfg = bqr.BqrConfig(cfg["epochs"], cfg["batch_size"], cfg["lr"], cfg["warmup_epochs"],
                         cfg["seed"])
    state, hist = bqr.train_bqr(recs["images"], recs["raters"] > 0.5, spec, state, bcfg, levels)
    fileio.save_network(out / "model", spec, state, {"task": "bqr", "levels": list(levels)})
    _write(out, "history.csv", _csv_text(["epoch", "phase", "loss"],
                                         [[r["epoch"], r["phase"], r["loss"]] for r in hist.rows]))
    return {"outputs": ["model.qtn", "model.json", "history.csv"],
            "final_loss": hist.rows[-1]["loss"]}


def cmd_calibrate(cfg, out: Path):
    _check_prob(cfg, "alpha")
    if cfg["scores"]:
        scores = _read_data(cfg["scores"], "scores")["scores"]
        source = {"scores": cfg["scores"]}
    else:
        if cfg["mode"] not in ("gaussian", "model_free"):
            raise ConfigError(f"unknown calibration mode {cfg['mode']!r}")
        model = fileio.load_vae(_model_stem(_require(cfg, "model")))
        x = _read_data(_require(cfg, "data"), "images")["images"]
        heads = vae.reconstruct(model, x)
        scores = []
        for i in range(len(x)):
            maps = _detect_maps(model, heads, i, cfg["mode"], cfg["alpha"])
            scores.append(anomaly.calibration_scores(x[i, 0], maps, cfg["mode"], cfg["alpha"]))
        scores = np.concatenate([s.ravel() for s in scores]) if scores else np.empty(0)
        source = {"model": cfg["model"], "data": cfg["data"], "mode": cfg["mode"]}
    scores = np.asarray(scores).ravel()
    if scores.size == 0:
        raise ConfigError("calibration set is empty")
    cal = conformal.calibrate(scores, cfg["alpha"])
    fileio.write_json(out / "calibration.json", cal.to_json())
    return {"outputs": ["calibration.json"], "margin": str(cal.margin), **source}


def _load_cal(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"calibration file {p} does not exist; run `calibrate` first")
    try:
        return conformal.ConformalCalibration.from_json(json.loads(p.read_text()))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{p} is not a calibration file: {exc}") from None


def cmd_detect(cfg, out: Path):
    _check_prob(cfg, "alpha")
    model = fileio.load_vae(_model_stem(_require(cfg, "model")))
    recs = _read_data(_require(cfg, "data"), "images")
    x = recs["images"]
    cal = _load_cal(cfg["calibration"]) if cfg["calibration"] else None
    results = run_detection(model, x, cfg["mode"], cfg["alpha"], cal, cfg["filter_window"])
    masks = np.stack([r.mask for r in results]) if results else np.zeros((0,) + x.shape[2:], bool)
    truth = recs["masks"] > 0.5 if "masks" in recs else None
    (out / "masks").mkdir(exist_ok=True)
    scales = {}
    for i, r in enumerate(results):
        fileio.write_pgm(out / "masks" / f"mask_{i:04d}.pgm", r.mask)
        scales[f"score_{i:04d}.pgm"] = fileio.write_pgm(out / "masks" / f"score_{i:04d}.pgm",
                                                        r.score_map)
    fileio.write_json(out / "masks" / "scales.json", {k: list(v) for k, v in scales.items()})
    records = {"masks": masks.astype(np.float64)}
    if results and results[0].z_map is not None:
        records["z"] = np.stack([r.z_map for r in results])
        records["p"] = np.stack([r.p_map for r in results])
    fileio.write_container(out / "detections.qtn", records)
    rows = []
    for i, r in enumerate(results):
        row = [i, int(r.mask.sum()), r.fdr_threshold]
        if truth is not None:
            row += [metrics.dice(r.mask, truth[i]), metrics.empirical_fdr(r.mask, truth[i])]
        rows.append(row)
    header = ["index", "n_flagged", "fdr_threshold"] + (["dice", "fdp"] if truth is not None else [])
    _write(out, "metrics.csv", _csv_text(header, rows))
    summary = {"outputs": ["masks/", "detections.qtn", "metrics.csv"], "n_images": len(results),
               "flagged_fraction": float(masks.mean()) if masks.size else 0.0,
               "auc": None, "dice": None}
    if truth is not None and masks.size:
        summary["dice"] = metrics.dice(masks, truth)
        if 0 < truth.sum() < truth.size:
            summary["auc"] = metrics.roc_auc(_score_stack(results), truth)
    return summary


def _variant_name(stem, model, pipeline):
    kind = "qrvae" if isinstance(model.head_mode, vae.Quantiles) else "vae"
    return f"{stem}:{kind}:{pipeline}"


def cmd_eval(cfg, out: Path):
    _check_prob(cfg, "alpha")
    if not cfg["vae_models"] and not cfg["bqr_model"]:
        raise ConfigError("eval needs vae_models (detection table) and/or bqr_model (segmentation table)")
    summary = {"outputs": []}
    saved = {}
    if cfg["vae_models"]:
        recs = _read_data(_require(cfg, "data"), "images", "masks")
        x, truth = recs["images"], recs["masks"] > 0.5
        rows = []
        for stem in [s.strip() for s in cfg["vae_models"].split(",") if s.strip()]:
            model = fileio.load_vae(_model_stem(stem))
            for pipe in [p.strip() for p in cfg["pipelines"].split(",") if p.strip()]:
                res = run_detection(model, x, pipe, cfg["alpha"], None, cfg["filter_window"])
                masks = np.stack([r.mask for r in res])
                name = _variant_name(stem, model, pipe)
                auc = metrics.roc_auc(_score_stack(res), truth)
                rows.append([name, auc, metrics.dice(masks, truth)])
                saved[f"detection.{name}"] = masks.astype(np.float64)
        _write(out, "detection.csv", _csv_text(["variant", "auc", "dice"], rows))
        summary["outputs"].append("detection.csv")
        summary["detection"] = {r[0]: {"auc": r[1], "dice": r[2]} for r in rows}
    if cfg["bqr_model"]:
        spec, state, meta = fileio.load_network(_model_stem(cfg["bqr_model"]))
        levels = tuple(meta["levels"])
        recs = _read_data(cfg["rater_data"] or _require(cfg, "data"), "images", "raters")
        x, raters = recs["images"], recs["raters"] > 0.5
        regions = np.concatenate([bqr.regions_from_logits(bqr.logits(spec, state, x[i:i + 32],
                                                                     levels))
                                  for i in range(0, len(x), 32)])
        agreements = [bqr.agreement_map(r) for r in raters]
        per_level = bqr.level_dice(regions, agreements, levels)
        rows = [[t, d.mean() if d.size else float("nan"), d.std() if d.size else float("nan"),
                 d.size] for t, d in zip(levels, per_level)]
        _write(out, "segmentation.csv", _csv_text(["level", "dice_mean", "dice_std", "n"], rows))
        saved["segmentation.regions"] = regions.astype(np.float64)
        summary["outputs"].append("segmentation.csv")
        (out / "regions").mkdir(exist_ok=True)
        for i in range(len(x)):
            for n, t in enumerate(levels):
                fileio.write_pgm(out / "regions" / f"img{i:04d}_tau{t:.3f}.pgm", regions[i, n])
        fileio.write_json(out / "regions" / "levels.json", {"levels": list(levels)})
    fileio.write_container(out / "masks.qtn", saved)
    summary["outputs"].append("masks.qtn")
    return summary


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "calibrate": cmd_calibrate,
            "detect": cmd_detect, "eval": cmd_eval}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="qrlesion", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--mode", default=None, help="train mode: vae | qrvae | bqr")
    return p


def _thread_limit():
    raw = os.environ.get("QTN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QTN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"QTN_THREADS must be a positive integer, got {raw!r}")
    return n


def run(command, config_text, out, seed=None, mode=None):
    """Run one command in-process; returns the summary dict."""
    cfg = fileio.parse_config(config_text, SCHEMAS[command])
    if seed is not None:
        cfg["seed"] = seed
    if mode is not None:
        if command != "train":
            raise UsageError("--mode only applies to train")
        cfg["mode"] = mode
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out, "config.txt", fileio.format_config(cfg))
    summary = {"command": command, **HANDLERS[command](cfg, out)}
    summary["generated_at"] = datetime.now(timezone.utc).isoformat()
    fileio.write_json(out / "summary.json", summary)
    return summary


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        limit = _thread_limit()
        text = Path(args.config).read_text(encoding="utf-8")
    except (ConfigError, OSError) as exc:
        print(f"qrlesion: config error: {exc}", file=sys.stderr)
        return 2
    try:
        if limit is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=limit):
                run(args.command, text, args.out, args.seed, args.mode)
        else:
            run(args.command, text, args.out, args.seed, args.mode)
    except (ConfigError, UsageError) as exc:
        print(f"qrlesion: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as a runtime failure
        print(f"qrlesion: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
