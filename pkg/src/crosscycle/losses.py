"""Training objectives as pure differentiable functions, plus their weighted assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .config import Hyperparameters, InvalidArgument

PROB_EPS = 1e-7
MS_EPS = 1e-5
MS_Z_EPS = 1e-5


class DegeneratePair(InvalidArgument):
    """Mode-seeking pair whose latent codes are (nearly) identical."""


def _finite(name, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise InvalidArgument(f"{name}: non-finite input")


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _log_softmax_clamped(logits):
    return torch.log(torch.softmax(logits, dim=-1).clamp(PROB_EPS, 1 - PROB_EPS))


def content_adversarial_loss(dc_logits_x, dc_logits_y, role: str) -> torch.Tensor:
    """Content adversarial objective for the content discriminator or the encoders.

    ``dc_logits_*`` are ``(N, k)`` domain logits for contents encoded from the
    first and second domain. The discriminator role is the domain cross-entropy
    (first domain labelled 0, second labelled 1). The encoder role is the
    cross-entropy of each prediction against the uniform distribution, summed
    over the two domains; it is minimal when the discriminator outputs 1/k.
    """
    _finite("content_adversarial_loss", dc_logits_x, dc_logits_y)
    logp_x = _log_softmax_clamped(dc_logits_x)
    logp_y = _log_softmax_clamped(dc_logits_y)
    if role == "discriminator":
        return -(logp_x[:, 0].mean() + logp_y[:, 1].mean())
    if role == "encoder":
        return -(logp_x.mean(dim=1).mean() + logp_y.mean(dim=1).mean())
    raise InvalidArgument(f"unknown role {role!r}")


def content_adversarial_multi(dc_logits, domains: torch.Tensor, role: str) -> torch.Tensor:
    """k-way version used in multi-domain mode; ``domains`` holds true indices."""
    _finite("content_adversarial_loss", dc_logits)
    logp = _log_softmax_clamped(dc_logits)
    if role == "discriminator":
        return -logp.gather(1, domains[:, None]).mean()
    if role == "encoder":
        return -logp.mean(dim=1).mean()
    raise InvalidArgument(f"unknown role {role!r}")


def _mae(a, b):
    return (a - b).abs().mean()


def cross_cycle_loss(x, y, x_hat, y_hat) -> torch.Tensor:
    _same_shape("cross_cycle_loss", x, x_hat)
    _same_shape("cross_cycle_loss", y, y_hat)
    _same_shape("cross_cycle_loss", x, y)
    _finite("cross_cycle_loss", x, y, x_hat, y_hat)
    return _mae(x_hat, x) + _mae(y_hat, y)


def self_reconstruction_loss(x, x_self) -> torch.Tensor:
    _same_shape("self_reconstruction_loss", x, x_self)
    _finite("self_reconstruction_loss", x, x_self)
    return _mae(x_self, x)


def domain_adversarial_loss(real_scores, fake_scores, role: str) -> torch.Tensor:
    """Binary cross-entropy on realism score maps (logits), averaged over the map.

    The generator role uses the non-saturating form ``-log D(fake)``; ``real_scores``
    is ignored there and may be None.
    """
    _finite("domain_adversarial_loss", fake_scores)
    p_fake = torch.sigmoid(fake_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    if role == "generator":
        return -torch.log(p_fake).mean()
    if role == "discriminator":
        _finite("domain_adversarial_loss", real_scores)
        p_real = torch.sigmoid(real_scores).clamp(PROB_EPS, 1 - PROB_EPS)
        return -torch.log(p_real).mean() - torch.log(1 - p_fake).mean()
    raise InvalidArgument(f"unknown role {role!r}")


def latent_regression_loss(z, z_hat) -> torch.Tensor:
    _same_shape("latent_regression_loss", z, z_hat)
    _finite("latent_regression_loss", z, z_hat)
    return _mae(z_hat, z)


def kl_loss(mean, logvar) -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over dimensions, averaged over the batch."""
    _same_shape("kl_loss", mean, logvar)
    _finite("kl_loss", mean, logvar)
    kl = 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1)
    if kl.dim() == 1:
        return kl.sum()
    return kl.sum(dim=-1).mean()


def mode_seeking_loss(img1, img2, z1, z2) -> torch.Tensor:
    """Latent distance over image distance; minimizing it spreads outputs apart."""
    _same_shape("mode_seeking_loss", img1, img2)
    _same_shape("mode_seeking_loss", z1, z2)
    _finite("mode_seeking_loss", img1, img2, z1, z2)
    d_z = _mae(z1, z2)
    if d_z.item() <= MS_Z_EPS:
        raise DegeneratePair(f"latent codes too close (d_z={d_z.item():.3g}); resample")
    return d_z / (_mae(img1, img2) + MS_EPS)


def domain_classification_terms(class_logits_real, true_domain, class_logits_fake, target_domain):
    """Return the (real, fake) negative log-likelihood terms of the auxiliary classifier."""
    if class_logits_real.shape[-1] < 2 or class_logits_real.shape != class_logits_fake.shape:
        raise InvalidArgument("domain_classification_loss: logits need matching length k >= 2")
    _finite("domain_classification_loss", class_logits_real, class_logits_fake)
    k = class_logits_real.shape[-1]
    real_idx = _indices(true_domain, class_logits_real, k)
    fake_idx = _indices(target_domain, class_logits_fake, k)
    real = -_log_softmax_clamped(class_logits_real).gather(-1, real_idx).mean()
    fake = -_log_softmax_clamped(class_logits_fake).gather(-1, fake_idx).mean()
    return real, fake


def domain_classification_loss(class_logits_real, true_domain, class_logits_fake, target_domain):
    real, fake = domain_classification_terms(class_logits_real, true_domain, class_logits_fake, target_domain)
    return real + fake


def _indices(domain, logits, k):
    if isinstance(domain, torch.Tensor):
        idx = domain.long().reshape(-1)
    else:
        idx = torch.tensor([getattr(domain, "index", domain)])
    if (idx < 0).any() or (idx >= k).any():
        raise InvalidArgument(f"domain index outside [0, {k})")
    if logits.dim() == 1:
        return idx[:1]
    return idx.expand(logits.shape[0]).reshape(-1, 1) if idx.numel() == 1 else idx.reshape(-1, 1)


def content_l1_regularizer(content) -> torch.Tensor:
    _finite("content_l1_regularizer", content)
    return content.abs().mean()


@dataclass
class LossReport:
    content_adv_d: float = 0.0
    content_adv_e: float = 0.0
    domain_adv_d: float = 0.0
    domain_adv_g: float = 0.0
    cross_cycle: float = 0.0
    self_recon: float = 0.0
    latent_reg: float = 0.0
    kl: float = 0.0
    mode_seeking: float = 0.0
    domain_cls_real: float = 0.0
    domain_cls_fake: float = 0.0
    content_l1: float = 0.0
    total_d: float = 0.0
    total_g: float = 0.0

    @property
    def domain_cls(self) -> float:
        return self.domain_cls_real + self.domain_cls_fake

    TERMS = ("content_adv_d", "content_adv_e", "domain_adv_d", "domain_adv_g", "cross_cycle",
             "self_recon", "latent_reg", "kl", "mode_seeking", "domain_cls", "content_l1")

    @classmethod
    def csv_header(cls) -> list[str]:
        return ["step", *cls.TERMS, "total_d", "total_g"]

    def csv_row(self, step: int) -> list[str]:
        vals = [getattr(self, t) for t in self.TERMS] + [self.total_d, self.total_g]
        return [str(step)] + [repr(float(v)) for v in vals]

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["domain_cls"] = self.domain_cls
        return d

    def nonfinite_term(self) -> str | None:
        for name, v in self.as_dict().items():
            if not math.isfinite(v):
                return name
        return None


def assemble_objectives(terms, hp: Hyperparameters, multi: bool = False):
    """Weighted sums ``(total_d, total_g)`` of raw terms.

    ``terms`` is a LossReport or any mapping/object exposing the raw term names;
    values may be floats or tensors (tensors keep the graph).
    """
    get = terms.get if isinstance(terms, dict) else (lambda n, default=0.0: getattr(terms, n, default))
    total_d = hp.lambda_content_adv * get("content_adv_d", 0.0) + hp.lambda_domain_adv * get("domain_adv_d", 0.0)
    total_g = (hp.lambda_content_adv * get("content_adv_e", 0.0)
               + hp.lambda_domain_adv * get("domain_adv_g", 0.0)
               + hp.lambda_cc * get("cross_cycle", 0.0)
               + hp.lambda_recon * get("self_recon", 0.0)
               + hp.lambda_latent * get("latent_reg", 0.0)
               + hp.lambda_kl * get("kl", 0.0)
               + hp.lambda_ms * get("mode_seeking", 0.0)
               + hp.lambda_content_l1 * get("content_l1", 0.0))
    if multi:
        total_d = total_d + hp.lambda_domain_cls * get("domain_cls_real", 0.0)
        total_g = total_g + hp.lambda_domain_cls * get("domain_cls_fake", 0.0)
    for name, v in (("total_d", total_d), ("total_g", total_g)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise InvalidArgument(f"{name} is non-finite")
    return total_d, total_g
