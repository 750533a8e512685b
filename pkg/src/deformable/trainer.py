"""Training loops: the two-step deformable classifier, CSTN and the STN baseline."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import latent as L
from . import net
from . import warp as W
from .data import LabeledDataset

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def model_checksum(model) -> str:
    h = hashlib.sha1()
    arrays = model.named_arrays() if isinstance(model, net.ModelParams) else model
    for name, arr in arrays.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# deformable classifier (two-step)


@dataclass
class DcTrainState:
    model: net.ModelParams
    latent_cfg: L.LatentSearchConfig
    train_cfg: net.TrainConfig
    param_steps_per_refresh: int = 1
    refresh_cfg: L.LatentSearchConfig | None = None  # latent search used while training
    history: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    momentum: net.Momentum = field(default_factory=net.Momentum)

    def __post_init__(self):
        if self.param_steps_per_refresh < 1:
            raise ValueError("param_steps_per_refresh must be >= 1")

    @property
    def search_cfg(self) -> L.LatentSearchConfig:
        return self.refresh_cfg or self.latent_cfg


def dc_refresh_latents(state: DcTrainState, images) -> np.ndarray:
    """Optimal ``z*`` for every (example, class) under the current snapshot.

    Returns ``(B, C, d)``.  The checksum of the snapshot used is appended to
    ``state.snapshots``.
    """
    snapshot = state.model
    state.snapshots.append(model_checksum(snapshot))
    return L.per_class_latents(snapshot, images, state.search_cfg).z


def _warp_per_class(images, family, z):
    b, c, d = z.shape
    x = np.repeat(images, c, axis=0)
    warped = W.warp(x, family, z.reshape(-1, d))
    return warped.reshape((b, c) + warped.shape[1:])


def latent_hinge_step(model, warped, labels, config: net.TrainConfig, state: net.Momentum):
    """Hinge step on scores ``s_ij = beta_j . Phi(warped[i, j])``."""
    b, c = warped.shape[:2]
    feats, cache = net.features_forward(model, warped.reshape((b * c,) + warped.shape[2:]))
    f = feats.shape[1]
    feats = feats.reshape(b, c, f)
    beta = model.heads
    scores = np.einsum("icf,cf->ic", feats, beta[:, :f]) + beta[:, f]
    loss, dscores = net.hinge_loss(scores, labels, config.lam, model)
    dscores = dscores / b
    dheads = np.empty_like(beta)
    dheads[:, :f] = np.einsum("ic,icf->cf", dscores, feats)
    dheads[:, f] = dscores.sum(axis=0)
    dfeat = (dscores[:, :, None] * beta[None, :, :f]).reshape(b * c, f)
    grads, _ = net.backward(model, cache, dfeat, need_input_grad=False)
    grads["heads"] = dheads
    return net.sgd_step(model, grads, config, state), loss, scores


def dc_param_step(state: DcTrainState, images, labels, z) -> tuple[float, np.ndarray]:
    """Parameter update with the latents held fixed.

    Warped inputs are computed once; ``param_steps_per_refresh`` SGD steps are
    taken on them.  When every class shares one latent per example, the
    features are computed once per example (the plain network step).
    Returns the loss and scores of the first step.
    """
    family = state.latent_cfg.family
    shared = bool(np.all(z == z[:, :1]))
    first = None
    if shared:
        warped = W.warp(images, family, z[:, 0])
    else:
        warped = _warp_per_class(images, family, z)
    for _ in range(state.param_steps_per_refresh):
        if shared:
            state.model, loss, scores = net.hinge_step(state.model, warped, labels,
                                                       state.train_cfg, state.momentum)
        else:
            state.model, loss, scores = latent_hinge_step(state.model, warped, labels,
                                                          state.train_cfg, state.momentum)
        if first is None:
            first = (loss, scores)
    return first


def evaluate_dc(model, ds: LabeledDataset, cfg: L.LatentSearchConfig) -> float:
    pred, _, _ = L.classify(model, ds.images, cfg)
    return float(np.mean(pred != ds.labels))


def train_dc(ds: LabeledDataset, spec=None, train_cfg: net.TrainConfig | None = None,
             latent_cfg: L.LatentSearchConfig | None = None, *,
             init: net.ModelParams | None = None, pretrain_ds: LabeledDataset | None = None,
             pretrain_cfg: net.TrainConfig | None = None, refresh_cfg=None,
             param_steps_per_refresh: int = 1, eval_ds: LabeledDataset | None = None,
             eval_every: int = 0) -> DcTrainState:
    """Algorithm: pretrain (or take ``init``), then per mini-batch refresh the
    latents against the frozen parameters and take parameter steps.

    Runs a fixed epoch budget.  A non-finite loss raises TrainingDiverged
    carrying the last finite model.
    """
    train_cfg = train_cfg or net.TrainConfig()
    latent_cfg = latent_cfg or L.LatentSearchConfig()
    if init is None:
        pre_ds = pretrain_ds if pretrain_ds is not None else ds
        init = net.pretrain(pre_ds, spec, pretrain_cfg or train_cfg, n_classes=ds.n_classes)
    state = DcTrainState(init, latent_cfg, train_cfg, param_steps_per_refresh, refresh_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    n = len(ds)
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, wrong = 0.0, 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start: start + train_cfg.batch_size]
            last_good = state.model
            z = dc_refresh_latents(state, ds.images[idx])
            loss, scores = dc_param_step(state, ds.images[idx], ds.labels[idx], z)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", last_good)
            total += loss
            wrong += int(np.sum(scores.argmax(axis=1) != ds.labels[idx]))
        rec = {"epoch": epoch, "phase": "dc", "loss": total, "train_error": wrong / max(n, 1),
               "test_error": "", "seconds": time.perf_counter() - t0}
        if eval_ds is not None and eval_every and (epoch + 1) % eval_every == 0:
            rec["test_error"] = evaluate_dc(state.model, eval_ds, latent_cfg)
        state.history.append(rec)
        log.info("dc epoch %d loss %.3f train_err %.4f", epoch, total, rec["train_error"])
    return state


# --------------------------------------------------------------------------
# class-based spatial transformers


def loc_spec_with_output(loc_spec: str, family: W.Family) -> str:
    return f"{loc_spec}-{family.n_params}l"


def init_loc_net(loc_spec: str, family: W.Family, input_shape, seed: int,
                 dtype=np.float32) -> net.ModelParams:
    """Localization net; its last (linear) layer is zeroed so it starts at the identity."""
    model = net.init_model(loc_spec_with_output(loc_spec, family), input_shape, 0, seed, dtype)
    last = len(model.layers) - 1
    model.weights[f"l{last}.w"][...] = 0
    model.weights[f"l{last}.b"][...] = 0
    return model


@dataclass
class CstnParams:
    """Per-class localization nets, the shared feature net and heads.

    A single localization net shared by all classes is the plain STN.
    """

    locs: list
    classifier: net.ModelParams
    family: W.Family

    @property
    def shared(self) -> bool:
        return len(self.locs) == 1

    def copy(self) -> "CstnParams":
        return CstnParams([m.copy() for m in self.locs], self.classifier.copy(), self.family)


def init_cstn(classifier: net.ModelParams, loc_spec: str, family: W.Family,
              n_locs: int | None = None, seed: int = 0) -> CstnParams:
    n_locs = classifier.n_classes if n_locs is None else n_locs
    locs = [init_loc_net(loc_spec, family, classifier.input_shape, seed + 1000 + c, classifier.dtype)
            for c in range(n_locs)]
    return CstnParams(locs, classifier.copy(), family)


def _loc_forward(loc, images, family):
    out, cache = net.features_forward(loc, images)
    return W.identity_params(family) + out.astype(np.float64), cache


def cstn_forward(cstn: CstnParams, images, keep_cache: bool = False):
    """Scores ``(B, C)``, latents ``(B, C, d)`` and warped images ``(B, C, ...)``."""
    images = np.asarray(images)
    model = cstn.classifier
    c = model.n_classes
    fam = cstn.family
    h, w = images.shape[-2:]
    if cstn.shared:
        z, loc_cache = _loc_forward(cstn.locs[0], images, fam)
        grid = W.build_grid(fam, z, h, w)
        warped = W.sample(images, grid)
        feats, cache = net.features_forward(model, warped)
        scores = net.class_scores(model, feats)
        zs = np.repeat(z[:, None], c, axis=1)
        warped_c = np.repeat(warped[:, None], c, axis=1)
        extra = (feats, cache, [loc_cache], [grid], warped)
    else:
        zs, loc_caches, grids, warped_c = [], [], [], []
        for loc in cstn.locs:
            z, lc = _loc_forward(loc, images, fam)
            grid = W.build_grid(fam, z, h, w)
            zs.append(z)
            loc_caches.append(lc)
            grids.append(grid)
            warped_c.append(W.sample(images, grid))
        zs = np.stack(zs, axis=1)
        warped_c = np.stack(warped_c, axis=1)
        b = len(images)
        feats, cache = net.features_forward(model, warped_c.reshape((b * c,) + warped_c.shape[2:]))
        f = feats.shape[1]
        feats = feats.reshape(b, c, f)
        scores = np.einsum("icf,cf->ic", feats, model.heads[:, :f]) + model.heads[:, f]
        extra = (feats, cache, loc_caches, grids, None)
    if keep_cache:
        return scores, zs, warped_c, extra
    return scores, zs, warped_c


def _score_loss(kind, scores, labels, lam, model):
    if kind == "softmax":
        loss, g = net.softmax_loss(scores, labels)
        if lam:
            loss += lam * net.l2_norm_sq(model)
        return loss, g
    return net.hinge_loss(scores, labels, lam, model)


@dataclass
class CstnOptim:
    classifier: net.Momentum = field(default_factory=net.Momentum)
    locs: list = field(default_factory=list)

    def loc(self, c):
        while len(self.locs) <= c:
            self.locs.append(net.Momentum())
        return self.locs[c]


def _classifier_grads(model, feats, cache, dscores, shared):
    f = model.heads.shape[1] - 1
    if shared:
        dheads, dfeat = net.scores_backward(model, feats, dscores)
    else:
        b, c = dscores.shape
        dheads = np.empty_like(model.heads)
        dheads[:, :f] = np.einsum("ic,icf->cf", dscores, feats)
        dheads[:, f] = dscores.sum(axis=0)
        dfeat = (dscores[:, :, None] * model.heads[None, :, :f]).reshape(b * c, f)
    grads, dimg = net.backward(model, cache, dfeat, need_input_grad=True)
    grads["heads"] = dheads
    return grads, dimg


def cstn_step(cstn: CstnParams, images, labels, cfg: net.TrainConfig, optim: CstnOptim,
              phase: str, loss_kind: str = "hinge"):
    """One mini-batch update.

    ``phase``: "classifier" updates the feature net and heads on the score
    loss; "transformers" ascends ``beta_c . Phi(T_{Psi_c(x)} x)`` for every
    class c over all batch examples; "joint" updates everything on the score
    loss (the STN baseline's end-to-end training).
    """
    images = np.asarray(images)
    scores, zs, _, extra = cstn_forward(cstn, images, keep_cache=True)
    feats, cache, loc_caches, grids, _ = extra
    model = cstn.classifier
    b, c = scores.shape
    fam = cstn.family
    loss, dscores = _score_loss(loss_kind, scores, labels, cfg.lam, model)
    if phase == "transformers":
        # maximise each class's own score: minimise its negative
        dscores = -np.ones_like(scores)
    dscores = dscores / b
    need_img = phase != "classifier"
    if cstn.shared:
        grads, dimg = _classifier_grads(model, feats, cache, dscores, True)
        dimgs = [dimg] if need_img else None
    else:
        grads, dimg = _classifier_grads(model, feats, cache, dscores, False)
        dimgs = list(dimg.reshape((b, c) + dimg.shape[1:]).transpose(1, 0, 2, 3, 4)) if need_img else None
    if phase in ("classifier", "joint"):
        cstn.classifier = net.sgd_step(model, grads, cfg, optim.classifier)
    if phase in ("transformers", "joint"):
        tcfg = cfg if phase == "joint" else net.TrainConfig(
            lam=0.0, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
            batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed)
        for k, loc in enumerate(cstn.locs):
            _, dgrid = W.sample_vjp(images, grids[k], dimgs[k])
            dz = W.grid_vjp(fam, zs[:, k], dgrid)
            lgrads, _ = net.backward(loc, loc_caches[k], dz, need_input_grad=False)
            cstn.locs[k] = net.sgd_step(loc, lgrads, tcfg, optim.loc(k))
    return loss, scores


def cstn_train_epoch(cstn: CstnParams, ds: LabeledDataset, cfg: net.TrainConfig,
                     rng: np.random.Generator, optim: CstnOptim | None = None,
                     schedule: str = "alternate", loss_kind: str = "hinge",
                     loc_cfg: net.TrainConfig | None = None):
    """One alternation: a classifier epoch then a transformer epoch.

    With ``schedule="joint"`` one epoch updates everything together instead.
    Returns ``(cstn, records)``.
    """
    optim = optim if optim is not None else CstnOptim()
    phases = ["joint"] if schedule == "joint" else ["classifier", "transformers"]
    records = []
    n = len(ds)
    for phase in phases:
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, wrong = 0.0, 0
        pcfg = loc_cfg if (phase == "transformers" and loc_cfg is not None) else cfg
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            loss, scores = cstn_step(cstn, ds.images[idx], ds.labels[idx], pcfg, optim, phase, loss_kind)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in CSTN {phase} phase")
            total += loss
            wrong += int(np.sum(scores.argmax(axis=1) != ds.labels[idx]))
        records.append({"phase": phase, "loss": total, "train_error": wrong / max(n, 1),
                        "seconds": time.perf_counter() - t0})
    return cstn, records


def cstn_predict(cstn: CstnParams, images, batch: int = 200):
    preds = []
    for start in range(0, len(images), batch):
        scores, _, _ = cstn_forward(cstn, images[start: start + batch])
        preds.append(scores.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def train_cstn(ds: LabeledDataset, classifier: net.ModelParams, loc_spec: str, family: W.Family,
               cfg: net.TrainConfig, loc_cfg: net.TrainConfig | None = None,
               loss_kind: str = "hinge", eval_ds: LabeledDataset | None = None,
               n_locs: int | None = None, schedule: str = "alternate"):
    """Alternate classifier / transformer epochs for ``cfg.epochs`` rounds."""
    cstn = init_cstn(classifier, loc_spec, family, n_locs, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optim = CstnOptim()
    history = []
    for epoch in range(cfg.epochs):
        cstn, recs = cstn_train_epoch(cstn, ds, cfg, rng, optim, schedule, loss_kind, loc_cfg)
        for r in recs:
            r.update(epoch=epoch, test_error="")
        if eval_ds is not None:
            recs[-1]["test_error"] = float(np.mean(cstn_predict(cstn, eval_ds.images) != eval_ds.labels))
        history.extend(recs)
        log.info("cstn epoch %d %s", epoch, recs)
    return cstn, history


# --------------------------------------------------------------------------
# plain spatial transformer baseline


def train_stn(ds: LabeledDataset, classifier: net.ModelParams, loc_spec: str, family: W.Family,
              cfg: net.TrainConfig, eval_ds: LabeledDataset | None = None):
    """One shared localization net and the classifier trained end to end
    with softmax cross-entropy."""
    fam = family
    loc = init_loc_net(loc_spec, fam, classifier.input_shape, cfg.seed + 1000, classifier.dtype)
    model = classifier.copy()
    rng = np.random.default_rng(cfg.seed)
    m_state, l_state = net.Momentum(), net.Momentum()
    history = []
    n = len(ds)
    h, w = ds.images.shape[-2:]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, wrong = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            x, y = ds.images[idx], ds.labels[idx]
            out, loc_cache = net.features_forward(loc, x)
            z = W.identity_params(fam) + out.astype(np.float64)
            grid = W.build_grid(fam, z, h, w)
            warped = W.sample(x, grid)
            feats, cache = net.features_forward(model, warped)
            scores = net.class_scores(model, feats)
            loss, dscores = net.softmax_loss(scores, y)
            if cfg.lam:
                loss += cfg.lam * net.l2_norm_sq(model)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite STN loss in epoch {epoch}")
            dheads, dfeat = net.scores_backward(model, feats, dscores / len(y))
            grads, dimg = net.backward(model, cache, dfeat, need_input_grad=True)
            grads["heads"] = dheads
            _, dgrid = W.sample_vjp(x, grid, dimg)
            dz = W.grid_vjp(fam, z, dgrid)
            lgrads, _ = net.backward(loc, loc_cache, dz, need_input_grad=False)
            model = net.sgd_step(model, grads, cfg, m_state)
            loc = net.sgd_step(loc, lgrads, cfg, l_state)
            total += loss
            wrong += int(np.sum(scores.argmax(axis=1) != y))
        rec = {"epoch": epoch, "phase": "stn", "loss": total, "train_error": wrong / max(n, 1),
               "test_error": "", "seconds": time.perf_counter() - t0}
        stn = CstnParams([loc], model, fam)
        if eval_ds is not None:
            rec["test_error"] = float(np.mean(cstn_predict(stn, eval_ds.images) != eval_ds.labels))
        history.append(rec)
    return CstnParams([loc], model, fam), history
