"""Experiment runner.

    deformable SUBCOMMAND --config run.cfg [--out DIR] [--seed N] [--threads N]

Every run writes ``manifest.txt`` (the fully resolved config) into its output
directory; passing that manifest back as ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import evaluation as E
from . import io
from . import latent as L
from . import net
from . import support as S
from . import trainer as T

log = logging.getLogger("deformable")

COMMANDS = ("prepare-data", "pretrain", "train-dc", "train-cstn", "train-stn", "eval", "pose",
            "declutter-eval", "stack-train")

# the 5000-digit excerpt: first 3000 (after shuffling) for training, last 2000 for testing
_TRAIN_POOL = 3000


# --------------------------------------------------------------------------
# data


def _pools(cfg: C.RunConfig):
    if cfg.source == "mlxtend":
        full = D.load_mlxtend_mnist()
        return full.take(range(_TRAIN_POOL)), full.take(range(_TRAIN_POOL, len(full)))
    return (D.load_idx_dataset(cfg.train_images, cfg.train_labels),
            D.load_idx_dataset(cfg.test_images, cfg.test_labels))


def _head(ds: D.LabeledDataset, n: int, what: str) -> D.LabeledDataset:
    if n > len(ds):
        raise D.InsufficientDataError(f"{what}: asked for {n} examples, {len(ds)} available")
    return ds.take(range(n))


def build_data(cfg: C.RunConfig) -> dict[str, D.LabeledDataset]:
    """Training, test and upright pretraining sets, fully determined by ``cfg``."""
    if cfg.source == "prepared":
        return {name: D.load_dataset(cfg.data_dir, name) for name in ("train", "test", "upright")}
    train_pool, test_pool = _pools(cfg)
    if cfg.per_class:
        train = D.subset_per_class(train_pool, cfg.per_class)
    else:
        train = _head(train_pool, cfg.n_train, "training set")
    test = _head(test_pool, cfg.n_test, "test set")
    upright = D.subset_per_class(train_pool, cfg.pretrain_per_class)
    if cfg.rotate:
        train = D.make_rotated_dataset(train, cfg.seed)
        test = D.make_rotated_dataset(test, cfg.seed + 10007)
    if cfg.clutter != "none":
        test = D.clutter_dataset(test, D.ClutterSpec(cfg.clutter), cfg.seed + 20011, source=train_pool)
    return {"train": train, "test": test, "upright": upright}


# --------------------------------------------------------------------------
# checkpoints


def _load_model(path, spec: str, input_shape) -> net.ModelParams:
    arrays = io.load_checkpoint(path)
    if "heads" not in arrays:
        raise io.CheckpointError(f"{path}: no heads array")
    model = net.init_model(spec, input_shape, arrays["heads"].shape[0])
    missing = set(model.named_arrays()) - set(arrays)
    if missing:
        raise io.CheckpointError(f"{path}: missing arrays {sorted(missing)}")
    for name, arr in model.named_arrays().items():
        if arrays[name].shape != arr.shape:
            raise io.CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, net spec wants {arr.shape}")
    return model.replace(arrays)


def _save_cstn(path, cstn: T.CstnParams):
    arrays = dict(cstn.classifier.named_arrays())
    for k, loc in enumerate(cstn.locs):
        arrays.update({f"loc{k}.{name}": a for name, a in loc.named_arrays().items()})
    io.save_checkpoint(path, arrays)


def _initial_model(cfg: C.RunConfig, ds, out: Path) -> net.ModelParams:
    """``init_model`` if given, otherwise pretrain on the upright subset."""
    shape = ds["train"].images.shape[1:]
    if cfg.init_model:
        return _load_model(cfg.init_model, cfg.net_spec, shape)
    hist = []
    model = net.pretrain(ds["upright"], cfg.net_spec, cfg.train_config(cfg.pretrain_epochs),
                         n_classes=ds["train"].n_classes, history=hist)
    for rec in hist:
        rec["phase"] = "pretrain"
    io.write_history(out / "pretrain_history.csv", hist)
    return model


def _model_for_eval(cfg: C.RunConfig, ds) -> net.ModelParams:
    if not cfg.model:
        raise C.ConfigError("this subcommand needs 'model = <checkpoint>'")
    return _load_model(cfg.model, cfg.net_spec, ds["train"].images.shape[1:])


def _error(pred, labels) -> float:
    return E.classification_error(pred, labels)


def _write_metrics(path, rows):
    io.write_csv(path, ["name", "value"], rows)


def _history_outputs(cfg, out: Path, history, name="history"):
    io.write_history(out / f"{name}.csv", history)
    if cfg.figures and history:
        from . import plotting

        plotting.history_figure(history, out / f"{name}.png")


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare_data(cfg, ds, out: Path):
    target = out / "data"
    for name, part in ds.items():
        D.save_dataset(part, target, name)
    if cfg.figures:
        from . import plotting

        plotting.image_grid_figure(ds["test"].images[:20], out / "test_samples.png",
                                   titles=ds["test"].labels[:20])
    _write_metrics(out / "metrics.csv", [[f"n_{k}", len(v)] for k, v in ds.items()])


def cmd_pretrain(cfg, ds, out: Path):
    hist = []
    model = net.pretrain(ds["upright"], cfg.net_spec, cfg.train_config(cfg.pretrain_epochs),
                         n_classes=ds["train"].n_classes, history=hist)
    io.save_checkpoint(out / "pretrain.ckpt", model.named_arrays())
    _history_outputs(cfg, out, hist)
    _write_metrics(out / "metrics.csv", [
        ["upright_train_error", _error(net.predict(model, ds["upright"].images), ds["upright"].labels)],
        ["test_error", _error(net.predict(model, ds["test"].images), ds["test"].labels)],
    ])


def cmd_train_dc(cfg, ds, out: Path):
    init = _initial_model(cfg, ds, out)
    state = T.train_dc(ds["train"], train_cfg=cfg.train_config(), latent_cfg=cfg.latent_config(),
                       init=init, refresh_cfg=cfg.latent_config(cfg.train_latent_method))
    io.save_checkpoint(out / "model.ckpt", state.model.named_arrays())
    _history_outputs(cfg, out, state.history)
    pred, res, _ = L.classify(state.model, ds["test"].images, cfg.latent_config())
    io.write_poses(out / "test_poses.csv", res)
    _write_metrics(out / "metrics.csv", [
        ["test_error", _error(pred, ds["test"].labels)],
        ["plain_test_error", _error(net.predict(state.model, ds["test"].images), ds["test"].labels)],
    ])


def _cstn_common(cfg, ds, out: Path, stn: bool):
    classifier = _initial_model(cfg, ds, out)
    fam = cfg.family_obj
    if stn:
        model, hist = T.train_stn(ds["train"], classifier, cfg.loc_spec, fam, cfg.train_config())
        name = "stn"
    else:
        model, hist = T.train_cstn(ds["train"], classifier, cfg.loc_spec, fam, cfg.train_config(),
                                   loss_kind=cfg.cstn_loss, schedule=cfg.cstn_schedule)
        name = "cstn"
    _save_cstn(out / f"{name}.ckpt", model)
    _history_outputs(cfg, out, hist)
    pred = T.cstn_predict(model, ds["test"].images)
    _write_metrics(out / "metrics.csv", [["test_error", _error(pred, ds["test"].labels)]])


def cmd_train_cstn(cfg, ds, out: Path):
    _cstn_common(cfg, ds, out, stn=False)


def cmd_train_stn(cfg, ds, out: Path):
    _cstn_common(cfg, ds, out, stn=True)


def cmd_eval(cfg, ds, out: Path):
    model = _model_for_eval(cfg, ds)
    test = ds["test"]
    pred, _, _ = L.classify(model, test.images, cfg.latent_config())
    io.write_csv(out / "predictions.csv", ["example", "label", "pred"],
                 ([i, int(a), int(b)] for i, (a, b) in enumerate(zip(test.labels, pred))))
    _write_metrics(out / "metrics.csv", [["test_error", _error(pred, test.labels)]])


def cmd_pose(cfg, ds, out: Path):
    model = _model_for_eval(cfg, ds)
    test = ds["test"]
    lcfg = cfg.latent_config()
    pred, res, _ = L.classify(model, test.images, lcfg)
    io.write_poses(out / "poses.csv", res)
    rows = [["test_error", _error(pred, test.labels)]]
    if test.angles is not None and lcfg.family.kind == "rotation":
        # pose under the true class
        true_z = res.z[np.arange(len(test)), test.labels]
        alpha_hat = E.predicted_angles_deg(true_z)
        rep = E.write_report(out, test.angles, alpha_hat, cfg.metric, cfg.bin_width,
                             images=res.warped(test.images)[np.arange(len(test)), test.labels][:20],
                             figures=cfg.figures)
        rows += [["mean_rotation_error_deg", rep["mean_deg"]],
                 ["fraction_below_15_deg", rep["frac_below_15"]],
                 ["fraction_above_150_deg", rep["frac_above_150"]]]
    _write_metrics(out / "metrics.csv", rows)


def _masks(cfg, ds, model) -> S.SupportMask:
    if cfg.masks:
        arr = io.load_checkpoint(cfg.masks)
        return S.SupportMask(arr["masks"], float(arr["tau"][0]))
    templates = S.build_templates(model, ds["train"], cfg.latent_config())
    return S.make_masks(templates, cfg.tau)


def _export_masks(cfg, out: Path, masks: S.SupportMask, templates=None):
    io.save_checkpoint(out / "masks.ckpt", {"masks": masks.masks, "tau": np.array([masks.tau])})
    S.export_pgms(out / "support", templates, masks)
    if cfg.figures:
        from . import plotting

        tiles = list(masks.masks) if templates is None else list(templates.means) + list(masks.masks)
        plotting.image_grid_figure(tiles, out / "support.png", ncols=len(masks.masks))


def cmd_stack_train(cfg, ds, out: Path):
    model = _model_for_eval(cfg, ds)
    lcfg = cfg.latent_config()
    templates = S.build_templates(model, ds["train"], lcfg)
    masks = S.make_masks(templates, cfg.tau)
    _export_masks(cfg, out, masks, templates)
    stacks = S.build_class_stack(model, ds["train"].images, masks, lcfg)
    D.save_dataset(D.LabeledDataset(stacks, ds["train"].labels), out / "stacks", "train")
    hist = []
    stack_model = S.train_stack_classifier(stacks, ds["train"].labels, cfg.stack_spec,
                                           cfg.train_config(cfg.stack_epochs), model.n_classes, hist)
    io.save_checkpoint(out / "stack.ckpt", stack_model.named_arrays())
    _history_outputs(cfg, out, hist)
    _write_metrics(out / "metrics.csv", [
        ["stack_train_error", _error(net.predict(stack_model, stacks), ds["train"].labels)],
    ] + [[f"template_sharpness_{j}", S.sharpness(t)] for j, t in enumerate(templates.means)])


def cmd_declutter_eval(cfg, ds, out: Path):
    model = _model_for_eval(cfg, ds)
    lcfg = cfg.latent_config()
    test = ds["test"]
    masks = _masks(cfg, ds, model)
    _export_masks(cfg, out, masks)
    # one latent search serves all three classifiers
    res = L.per_class_latents(model, test.images, lcfg)
    plain = res.scores.argmax(axis=1)
    masked = S.classify_masked(model, test.images, masks, lcfg, latents=res)
    rows = [["unmasked_accuracy", 1 - _error(plain, test.labels)],
            ["masked_accuracy", 1 - _error(masked, test.labels)]]
    preds = [plain, masked]
    if cfg.stack_model:
        stack_model = _load_model(cfg.stack_model, cfg.stack_spec, (model.n_classes,) + test.images.shape[2:])
        stacked = S.classify_stacked(stack_model, model, test.images, masks, lcfg, latents=res)
        rows.append(["stacked_accuracy", 1 - _error(stacked, test.labels)])
        preds.append(stacked)
    header = ["example", "label", "unmasked", "masked"] + (["stacked"] if cfg.stack_model else [])
    io.write_csv(out / "predictions.csv", header,
                 ([i, int(test.labels[i])] + [int(p[i]) for p in preds] for i in range(len(test))))
    _write_metrics(out / "metrics.csv", rows)


HANDLERS = {
    "prepare-data": cmd_prepare_data,
    "pretrain": cmd_pretrain,
    "train-dc": cmd_train_dc,
    "train-cstn": cmd_train_cstn,
    "train-stn": cmd_train_stn,
    "eval": cmd_eval,
    "pose": cmd_pose,
    "declutter-eval": cmd_declutter_eval,
    "stack-train": cmd_stack_train,
}


# --------------------------------------------------------------------------
# entry point


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformable", description="Deformable classifier experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="key = value run configuration (or a manifest)")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="overrides the configured seed")
    p.add_argument("--threads", type=int, help="BLAS thread limit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg: C.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(cfg.to_text(f"deformable {command}"))
    ds = build_data(cfg)
    HANDLERS[command](cfg, ds, out)
    return out


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load_config(args.config)
        cfg = C.with_overrides(cfg, out_dir=args.out, seed=args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise C.ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                run(args.command, cfg)
        else:
            run(args.command, cfg)
    except Exception as exc:  # one parsable line, nonzero exit
        msg = " ".join(str(exc).split())
        print(f"error kind={type(exc).__name__} command={args.command} message={msg}", file=sys.stderr)
        return 2 if isinstance(exc, C.ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
