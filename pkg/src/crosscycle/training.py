"""Cross-cycle translation rounds and the alternating optimization loop."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .config import Hyperparameters, InvalidArgument, RngStream, sample_attribute_prior
from .data import UnpairedDataset, sample_unpaired
from .losses import (
    DegeneratePair,
    LossReport,
    assemble_objectives,
    content_adversarial_loss,
    content_adversarial_multi,
    content_l1_regularizer,
    cross_cycle_loss,
    domain_adversarial_loss,
    domain_classification_terms,
    kl_loss,
    latent_regression_loss,
    mode_seeking_loss,
    self_reconstruction_loss,
)
from .networks import (
    ModelSet,
    build_models,
    discriminate_content,
    discriminate_domain,
    discriminate_low,
    encode_attribute,
    encode_content,
    generate,
    generate_multiscale,
)

log = logging.getLogger(__name__)

MAX_NONFINITE = 3
STREAMS = ("init", "data", "prior", "noise")


class NonFiniteLoss(RuntimeError):
    def __init__(self, term: str):
        super().__init__(f"non-finite loss term: {term}")
        self.term = term


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TranslationRound:
    x: torch.Tensor
    y: torch.Tensor
    dx: int
    dy: int
    codes: dict
    u: torch.Tensor
    v: torch.Tensor
    x_hat: torch.Tensor | None = None
    y_hat: torch.Tensor | None = None
    x_self: torch.Tensor | None = None
    y_self: torch.Tensor | None = None
    z: torch.Tensor | None = None
    z2: torch.Tensor | None = None
    x_rand: torch.Tensor | None = None
    y_rand: torch.Tensor | None = None
    x_rand2: torch.Tensor | None = None
    y_rand2: torch.Tensor | None = None
    z_hat_x: torch.Tensor | None = None
    z_hat_y: torch.Tensor | None = None
    u_low: torch.Tensor | None = None
    v_low: torch.Tensor | None = None


def _gen(models, content, attr, domain, low=False):
    if low:
        return generate_multiscale(models, content, attr, domain)
    return generate(models, content, attr, domain), None


def forward_translation(models: ModelSet, x, y, dx, dy, rng: RngStream | None = None, low=False):
    """First stage: swap attributes. ``u`` lands in x's domain, ``v`` in y's."""
    zc_x = encode_content(models, x, dx)
    zc_y = encode_content(models, y, dy)
    mu_x, lv_x, za_x = encode_attribute(models, x, dx, rng)
    mu_y, lv_y, za_y = encode_attribute(models, y, dy, rng)
    u, u_low = _gen(models, zc_y, za_x, dx, low)
    v, v_low = _gen(models, zc_x, za_y, dy, low)
    codes = dict(zc_x=zc_x, zc_y=zc_y, mu_x=mu_x, lv_x=lv_x, za_x=za_x, mu_y=mu_y, lv_y=lv_y, za_y=za_y)
    if low:
        codes.update(u_low=u_low, v_low=v_low)
    return u, v, codes


def backward_translation(models: ModelSet, u, v, dx, dy, rng: RngStream | None = None, codes=None):
    """Second stage: swap the attributes of ``u`` and ``v`` back."""
    zc_u = encode_content(models, u, dx)
    zc_v = encode_content(models, v, dy)
    _, _, za_u = encode_attribute(models, u, dx, rng)
    _, _, za_v = encode_attribute(models, v, dy, rng)
    if codes is not None:
        codes.update(zc_u=zc_u, zc_v=zc_v, za_u=za_u, za_v=za_v)
    x_hat = generate(models, zc_v, za_u, dx)
    y_hat = generate(models, zc_u, za_v, dy)
    return x_hat, y_hat


def translation_round(models: ModelSet, x, dx, y, dy, noise: RngStream, prior: RngStream,
                      mode_seeking: bool = True) -> TranslationRound:
    hp = models.hp
    low = hp.multiscale_enabled
    u, v, codes = forward_translation(models, x, y, dx, dy, noise, low)
    r = TranslationRound(x=x, y=y, dx=dx, dy=dy, codes=codes, u=u, v=v,
                         u_low=codes.get("u_low"), v_low=codes.get("v_low"))
    r.x_hat, r.y_hat = backward_translation(models, u, v, dx, dy, noise, codes)
    r.x_self = generate(models, codes["zc_x"], codes["za_x"], dx)
    r.y_self = generate(models, codes["zc_y"], codes["za_y"], dy)
    n = x.shape[0]
    r.z = sample_attribute_prior(hp.attribute_dim, prior, n).to(x.dtype)
    r.z2 = sample_attribute_prior(hp.attribute_dim, prior, n).to(x.dtype)
    r.x_rand = generate(models, codes["zc_x"], r.z, dx)
    r.y_rand = generate(models, codes["zc_y"], r.z, dy)
    r.z_hat_x = encode_attribute(models, r.x_rand, dx)[0]
    r.z_hat_y = encode_attribute(models, r.y_rand, dy)[0]
    if mode_seeking:
        r.x_rand2 = generate(models, codes["zc_x"], r.z2, dx)
        r.y_rand2 = generate(models, codes["zc_y"], r.z2, dy)
    return r


class TrainState:
    """Models, both optimizers, the named RNG streams and the step counter."""

    def __init__(self, hp: Hyperparameters, seed: int, models: ModelSet | None = None):
        self.hp = hp
        self.seed = seed
        self.rngs = {name: RngStream(seed, name) for name in STREAMS}
        self.models = models if models is not None else build_models(hp, self.rngs["init"])
        betas = (hp.beta1, hp.beta2)
        self.opt_g = torch.optim.Adam(self.models.generator_parameters(), lr=hp.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(self.models.discriminator_parameters(), lr=hp.learning_rate, betas=betas)
        self.step = 0

    # snapshots used for roll-back ---------------------------------------------
    def _snapshot(self):
        return ([p.detach().clone() for p in self.models.parameters()],
                _clone_opt_state(self.opt_g), _clone_opt_state(self.opt_d), self.step)

    def _restore(self, snap):
        params, sg, sd, step = snap
        with torch.no_grad():
            for p, saved in zip(self.models.parameters(), params):
                p.copy_(saved)
        self.opt_g.load_state_dict(sg)
        self.opt_d.load_state_dict(sd)
        self.step = step

    # persistence ------------------------------------------------------------
    def save(self, path) -> str:
        header = {
            "format": "crosscycle-checkpoint",
            "config": self.hp.to_dict(),
            "config_hash": self.hp.config_hash(),
            "mode": "multi" if self.hp.multi_domain else "dual",
            "seed": self.seed,
            "step": self.step,
            "parameter_count": self.models.parameter_count(),
            "rng": {name: ckpt.encode_rng_state(r.get_state()) for name, r in self.rngs.items()},
        }
        blocks = ckpt.model_blocks(self.models)
        blocks.update(ckpt.optimizer_blocks("opt_g", self.opt_g))
        blocks.update(ckpt.optimizer_blocks("opt_d", self.opt_d))
        return ckpt.write_checkpoint(path, header, blocks)

    @classmethod
    def load(cls, path, expected: Hyperparameters | None = None) -> "TrainState":
        header, blocks = ckpt.read_checkpoint(path)
        hp = Hyperparameters.from_dict(header["config"])
        if expected is not None and expected.config_hash() != header["config_hash"]:
            raise ckpt.ConfigMismatch(f"{path}: checkpoint config hash differs from the requested config")
        if hp.config_hash() != header["config_hash"]:
            raise ckpt.CheckpointError(f"{path}: stored config does not match its hash")
        state = cls(hp, header["seed"])
        ckpt.load_model_blocks(state.models, blocks)
        ckpt.load_optimizer_blocks("opt_g", state.opt_g, blocks)
        ckpt.load_optimizer_blocks("opt_d", state.opt_d, blocks)
        for name, text in header["rng"].items():
            state.rngs[name].set_state(ckpt.decode_rng_state(text))
        state.step = header["step"]
        return state


def _clone_opt_state(opt):
    sd = opt.state_dict()
    return {"state": {k: {n: t.clone() if torch.is_tensor(t) else t for n, t in v.items()}
                      for k, v in sd["state"].items()},
            "param_groups": [dict(g) for g in sd["param_groups"]]}


def _content_adv(models, logits_x, logits_y, dx, dy, role):
    if not models.multi:
        return content_adversarial_loss(logits_x, logits_y, role)
    ix = torch.full((logits_x.shape[0],), dx)
    iy = torch.full((logits_y.shape[0],), dy)
    return content_adversarial_multi(logits_x, ix, role) + content_adversarial_multi(logits_y, iy, role)


def _downsample(img, factor=4):
    return F.avg_pool2d(img, factor)


def _set_requires_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


def _check(name, value):
    if not torch.isfinite(value).all():
        raise NonFiniteLoss(name)
    return value


def discriminator_terms(models: ModelSet, r: TranslationRound, hp: Hyperparameters) -> dict:
    """Phase-one terms with generator outputs detached."""
    t = {}
    zc_x, zc_y = r.codes["zc_x"].detach(), r.codes["zc_y"].detach()
    t["content_adv_d"] = _content_adv(models, discriminate_content(models, zc_x),
                                      discriminate_content(models, zc_y), r.dx, r.dy, "discriminator")
    adv = 0
    cls_real = []
    for real, fakes, dom in ((r.x, (r.u, r.x_rand), r.dx), (r.y, (r.v, r.y_rand), r.dy)):
        real_map, real_logits = discriminate_domain(models, real, dom)
        fake_map, _ = discriminate_domain(models, torch.cat([f.detach() for f in fakes]), dom)
        adv = adv + domain_adversarial_loss(real_map, fake_map, "discriminator")
        cls_real.append(real_logits)
    if hp.multiscale_enabled:
        for real, low, dom in ((r.x, r.u_low, r.dx), (r.y, r.v_low, r.dy)):
            adv = adv + domain_adversarial_loss(discriminate_low(models, _downsample(real), dom),
                                                discriminate_low(models, low.detach(), dom), "discriminator")
    t["domain_adv_d"] = adv
    if models.multi:
        logits = torch.cat(cls_real)
        labels = torch.cat([torch.full((r.x.shape[0],), r.dx), torch.full((r.y.shape[0],), r.dy)])
        real_term, _ = domain_classification_terms(logits, labels, logits.detach(), labels)
        t["domain_cls_real"] = real_term
    return t


def generator_terms(models: ModelSet, r: TranslationRound, hp: Hyperparameters) -> dict:
    t = {}
    c = r.codes
    t["content_adv_e"] = _content_adv(models, discriminate_content(models, c["zc_x"]),
                                      discriminate_content(models, c["zc_y"]), r.dx, r.dy, "encoder")
    adv = 0
    cls_fake = []
    for fakes, dom in (((r.u, r.x_rand), r.dx), ((r.v, r.y_rand), r.dy)):
        fake_map, _ = discriminate_domain(models, torch.cat(fakes), dom)
        adv = adv + domain_adversarial_loss(None, fake_map, "generator")
    if hp.multiscale_enabled:
        for low, dom in ((r.u_low, r.dx), (r.v_low, r.dy)):
            adv = adv + domain_adversarial_loss(None, discriminate_low(models, low, dom), "generator")
    t["domain_adv_g"] = adv
    t["cross_cycle"] = cross_cycle_loss(r.x, r.y, r.x_hat, r.y_hat)
    t["self_recon"] = self_reconstruction_loss(r.x, r.x_self) + self_reconstruction_loss(r.y, r.y_self)
    t["latent_reg"] = latent_regression_loss(r.z, r.z_hat_x) + latent_regression_loss(r.z, r.z_hat_y)
    t["kl"] = kl_loss(c["mu_x"], c["lv_x"]) + kl_loss(c["mu_y"], c["lv_y"])
    if r.x_rand2 is not None:
        t["mode_seeking"] = (mode_seeking_loss(r.x_rand, r.x_rand2, r.z, r.z2)
                             + mode_seeking_loss(r.y_rand, r.y_rand2, r.z, r.z2))
    t["content_l1"] = content_l1_regularizer(c["zc_x"]) + content_l1_regularizer(c["zc_y"])
    if models.multi:
        _, logits_u = discriminate_domain(models, r.u, r.dx)
        _, logits_v = discriminate_domain(models, r.v, r.dy)
        logits = torch.cat([logits_u, logits_v])
        labels = torch.cat([torch.full((r.u.shape[0],), r.dx), torch.full((r.v.shape[0],), r.dy)])
        _, fake_term = domain_classification_terms(logits.detach(), labels, logits, labels)
        t["domain_cls_fake"] = fake_term
    return t


def _draw_round(state: TrainState, x, dx, y, dy):
    use_ms = state.hp.lambda_ms > 0
    for _ in range(8):
        r = translation_round(state.models, x, dx, y, dy, state.rngs["noise"], state.rngs["prior"], use_ms)
        if not use_ms or float((r.z - r.z2).abs().mean()) > 1e-5:
            return r
    raise DegeneratePair("could not draw distinct prior pair")


def train_step(state: TrainState, batch) -> LossReport:
    """One discriminator update followed by one encoder/generator update.

    On a non-finite term the parameters, optimizer moments and step counter are
    restored and NonFiniteLoss is raised; RNG streams keep their advanced state so
    a retry sees fresh draws.
    """
    x, dx, y, dy = batch
    hp, models = state.hp, state.models
    snap = state._snapshot()
    try:
        r = _draw_round(state, x, dx, y, dy)

        d_params = models.discriminator_parameters()
        state.opt_d.zero_grad(set_to_none=True)
        d_terms = {k: _check(k, v) for k, v in discriminator_terms(models, r, hp).items()}
        total_d, _ = assemble_objectives(d_terms, hp, models.multi)
        _check("total_d", total_d).backward()
        state.opt_d.step()

        _set_requires_grad(d_params, False)
        try:
            state.opt_g.zero_grad(set_to_none=True)
            g_terms = {k: _check(k, v) for k, v in generator_terms(models, r, hp).items()}
            _, total_g = assemble_objectives(g_terms, hp, models.multi)
            _check("total_g", total_g).backward()
        finally:
            _set_requires_grad(d_params, True)
        state.opt_g.step()
        for p in models.parameters():
            if not torch.isfinite(p).all():
                raise NonFiniteLoss("parameters")
    except NonFiniteLoss:
        state._restore(snap)
        raise
    state.step += 1
    values = {k: float(v.detach()) for k, v in {**d_terms, **g_terms}.items()}
    return LossReport(**values, total_d=float(total_d.detach()), total_g=float(total_g.detach()))


# run directory driver ---------------------------------------------------------

def _write_loss_rows(path: Path, rows, keep_until: int | None = None):
    if keep_until is not None and path.exists():
        with open(path, newline="") as f:
            kept = [row for row in csv.reader(f)][1:]
        kept = [row for row in kept if int(row[0]) <= keep_until]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LossReport.csv_header())
            w.writerows(kept)
        return
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(LossReport.csv_header())
        w.writerows(rows)


def write_sample_grid(models: ModelSet, dataset: UnpairedDataset, path, seed: int = 0) -> None:
    """4x4 grid: each row is one source image followed by three random-attribute translations."""
    from .inference import translate_random, write_grid

    rng = RngStream(seed, "samples")
    tiles = []
    for row in range(4):
        src_dom = row % 2 if not models.multi else row % dataset.k
        tgt_dom = (src_dom + 1) % dataset.k
        imgs = dataset.images[src_dom]
        x = imgs[row // 2 % len(imgs)][None]
        tiles.append(x[0])
        tiles.extend(translate_random(models, x, src_dom, tgt_dom, 3, rng))
    write_grid(tiles, 4, path)


def train(hp: Hyperparameters, dataset: UnpairedDataset, run_dir, seed: int = 0, resume: bool = False,
          iterations: int | None = None, on_step=None) -> Path:
    """Run the training loop, writing losses, checkpoints and sample grids to ``run_dir``.

    With ``resume`` the latest checkpoint in ``run_dir`` is loaded (its config must
    match ``hp``) and the run continues bit-identically.
    """
    if dataset.k < 2:
        raise InvalidArgument("dataset needs at least two domains")
    for d, imgs in enumerate(dataset.images):
        if len(imgs) == 0:
            raise InvalidArgument(f"domain {d} is empty")
    if hp.multi_domain and dataset.k != hp.num_domains:
        raise InvalidArgument(f"dataset has {dataset.k} domains, config expects {hp.num_domains}")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    total = hp.iterations if iterations is None else iterations
    losses_path = run_dir / "losses.csv"

    state = None
    if resume:
        latest = latest_checkpoint(run_dir)
        if latest is not None:
            state = TrainState.load(latest, expected=hp)
            _write_loss_rows(losses_path, [], keep_until=state.step)
    if state is None:
        run_dir.mkdir(parents=True, exist_ok=True)
        state = TrainState(hp, seed)
        if losses_path.exists():
            losses_path.unlink()
    (run_dir / "config.json").write_text(hp.to_json())

    rows, failures = [], 0
    last_path = None
    while state.step < total:
        batch = sample_unpaired(dataset, state.rngs["data"], hp.multi_domain, hp.batch_size)
        try:
            report = train_step(state, batch)
        except NonFiniteLoss as exc:
            failures += 1
            log.warning("step %d rolled back: %s", state.step + 1, exc)
            if failures >= MAX_NONFINITE:
                raise TrainingAborted(f"{failures} consecutive non-finite steps (last term: {exc.term})") from exc
            continue
        failures = 0
        rows.append(report.csv_row(state.step))
        if on_step is not None:
            on_step(state, report)
        if state.step % hp.checkpoint_every == 0 or state.step == total:
            _write_loss_rows(losses_path, rows)
            rows = []
            last_path = ckpt_dir / f"step_{state.step}.ckpt"
            state.save(last_path)
            write_sample_grid(state.models, dataset, run_dir / "samples" / f"step_{state.step}.png")
    _write_loss_rows(losses_path, rows)
    if last_path is None:
        last_path = ckpt_dir / f"step_{state.step}.ckpt"
        state.save(last_path)
    return last_path


def latest_checkpoint(run_dir) -> Path | None:
    paths = list((Path(run_dir) / "checkpoints").glob("step_*.ckpt"))
    if not paths:
        return None
    return max(paths, key=lambda p: int(p.stem.split("_")[1]))


def read_losses(run_dir) -> list[dict]:
    with open(Path(run_dir) / "losses.csv", newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
