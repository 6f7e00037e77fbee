"""Encoders, generators and discriminators, plus the ModelSet that ties them together.

Dual mode holds one network per domain and shares the last content-encoder block
and the first generator block between the two domains. Multi-domain mode holds a
single network of each kind conditioned on a one-hot domain code.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DomainCode, Hyperparameters, InvalidArgument, InvalidState, RngStream, validate_config

DOWNSAMPLE = 8  # three stride-2 stages in the content encoder


def _conv(cin, cout, k=3, s=1, p=1):
    return nn.Conv2d(cin, cout, k, s, p)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = _conv(ch, ch)
        self.conv2 = _conv(ch, ch)

    def forward(self, x):
        h = F.relu(F.instance_norm(self.conv1(x)))
        h = F.instance_norm(self.conv2(h))
        return x + h


class CondResBlock(nn.Module):
    """Residual block whose normalized activations are scaled and shifted by the attribute."""

    def __init__(self, ch, cond_dim):
        super().__init__()
        self.conv1 = _conv(ch, ch)
        self.conv2 = _conv(ch, ch)
        self.film = nn.Linear(cond_dim, 4 * ch)

    def forward(self, x, cond):
        g1, b1, g2, b2 = self.film(cond)[:, :, None, None].chunk(4, dim=1)
        h = F.instance_norm(self.conv1(x)) * (1 + g1) + b1
        h = F.relu(h)
        h = F.instance_norm(self.conv2(h)) * (1 + g2) + b2
        return x + h


class ContentEncoder(nn.Module):
    def __init__(self, width, shared_last: ResBlock):
        super().__init__()
        c = 4 * width
        self.down1 = nn.Conv2d(3, width, 4, 2, 1)
        self.down2 = nn.Conv2d(width, 2 * width, 4, 2, 1)
        self.down3 = nn.Conv2d(2 * width, c, 4, 2, 1)
        self.blocks = nn.ModuleList([ResBlock(c) for _ in range(3)])
        self.last = shared_last

    def forward(self, x):
        h = F.leaky_relu(self.down1(x), 0.2)
        h = F.relu(F.instance_norm(self.down2(h)))
        h = F.relu(F.instance_norm(self.down3(h)))
        for block in self.blocks:
            h = block(h)
        return self.last(h)


class AttributeEncoder(nn.Module):
    def __init__(self, width, attr_dim, n_cond=0):
        super().__init__()
        chans = [3 + n_cond, width, 2 * width, 4 * width, 4 * width]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1) for i in range(4))
        self.fc = nn.Linear(4 * width, 4 * width)
        self.head = nn.Linear(4 * width, 2 * attr_dim)
        self.attr_dim = attr_dim

    def forward(self, x, domain_vec=None):
        if domain_vec is not None:
            x = torch.cat([x, _broadcast(domain_vec, x)], dim=1)
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
        h = F.relu(self.fc(h.mean(dim=(2, 3))))
        mean, logvar = self.head(h).split(self.attr_dim, dim=1)
        return mean, logvar


def _up_block(conv, h):
    h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
    return F.relu(F.layer_norm(h, h.shape[1:]))


class Generator(nn.Module):
    def __init__(self, width, attr_dim, shared_first: ResBlock, n_cond=0, multiscale=False):
        super().__init__()
        c = 4 * width
        self.first = shared_first
        self.blocks = nn.ModuleList([CondResBlock(c, attr_dim + n_cond) for _ in range(3)])
        # nearest-neighbour upsampling followed by a 3x3 conv avoids the checkerboard
        # artifacts of strided transposed convolutions and converges faster here
        self.up1 = _conv(c, 2 * width)
        self.up2 = _conv(2 * width, width)
        self.up3 = _conv(width, width)
        self.out = _conv(width, 3)
        self.low_head = _conv(2 * width, 3) if multiscale else None

    def forward(self, content, attr, domain_vec=None, return_low=False):
        cond = attr if domain_vec is None else torch.cat([attr, domain_vec], dim=1)
        h = self.first(content)
        for block in self.blocks:
            h = block(h, cond)
        h = _up_block(self.up1, h)
        low = torch.tanh(self.low_head(h)) if return_low else None
        h = _up_block(self.up2, h)
        h = _up_block(self.up3, h)
        out = torch.tanh(self.out(h))
        return (out, low) if return_low else out


class Discriminator(nn.Module):
    """Patch discriminator; with ``n_classes`` it also emits domain logits."""

    def __init__(self, width, n_layers=3, n_classes=0):
        super().__init__()
        chans = [3] + [width * 2 ** i for i in range(n_layers)]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1) for i in range(n_layers))
        self.realism = _conv(chans[-1], 1)
        self.classifier = nn.Linear(chans[-1], n_classes) if n_classes else None

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        logits = self.classifier(h.mean(dim=(2, 3))) if self.classifier is not None else None
        return self.realism(h), logits


class ContentDiscriminator(nn.Module):
    def __init__(self, ch, n_out):
        super().__init__()
        self.conv1 = _conv(ch, ch, s=2)
        self.conv2 = _conv(ch, ch, s=2)
        self.fc = nn.Linear(ch, n_out)

    def forward(self, z):
        h = F.leaky_relu(self.conv1(z), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        return self.fc(h.mean(dim=(2, 3)))


def _broadcast(vec, like):
    return vec[:, :, None, None].expand(-1, -1, like.shape[2], like.shape[3])


class ModelSet(nn.Module):
    """The full bundle of networks for one run.

    In dual mode every ``ModuleList`` has one entry per domain; in multi-domain
    mode each has a single shared entry.
    """

    def __init__(self, hp: Hyperparameters):
        super().__init__()
        self.hp = hp
        self.multi = hp.multi_domain
        self.k = hp.num_domains
        w, d = hp.base_channels, hp.attribute_dim
        self.content_shape = (4 * w, hp.image_size // DOWNSAMPLE, hp.image_size // DOWNSAMPLE)
        n_nets = 1 if self.multi else 2
        n_cond = self.k if self.multi else 0
        shared_enc = ResBlock(4 * w)
        shared_gen = ResBlock(4 * w)
        self.content_encoders = nn.ModuleList(ContentEncoder(w, shared_enc) for _ in range(n_nets))
        self.attribute_encoders = nn.ModuleList(AttributeEncoder(w, d, n_cond) for _ in range(n_nets))
        self.generators = nn.ModuleList(
            Generator(w, d, shared_gen, n_cond, hp.multiscale_enabled) for _ in range(n_nets))
        self.discriminators = nn.ModuleList(
            Discriminator(w, 3, self.k if self.multi else 0) for _ in range(n_nets))
        self.content_discriminator = ContentDiscriminator(4 * w, self.k)
        if hp.multiscale_enabled:
            self.low_discriminators = nn.ModuleList(Discriminator(w, 2) for _ in range(n_nets))
        else:
            self.low_discriminators = nn.ModuleList()

    # parameter groups -------------------------------------------------------
    def generator_parameters(self):
        mods = [self.content_encoders, self.attribute_encoders, self.generators]
        return list(_unique(p for m in mods for p in m.parameters()))

    def discriminator_parameters(self):
        mods = [self.discriminators, self.content_discriminator, self.low_discriminators]
        return list(_unique(p for m in mods for p in m.parameters()))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def weight_ties(self) -> list[tuple[str, str]]:
        if self.multi:
            return []
        return [("content_encoders.0.last", "content_encoders.1.last"),
                ("generators.0.first", "generators.1.first")]

    # helpers ----------------------------------------------------------------
    def slot(self, domain) -> int:
        idx = domain_index(domain, self.k)
        return 0 if self.multi else idx

    def domain_vec(self, domain, batch: int) -> torch.Tensor | None:
        if not self.multi:
            return None
        dtype = next(self.parameters()).dtype
        return one_hot_batch(domain_index(domain, self.k), self.k, batch, dtype)

    @property
    def image_shape(self):
        return (3, self.hp.image_size, self.hp.image_size)


def _unique(params):
    seen = set()
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            yield p


def domain_index(domain, k: int) -> int:
    if isinstance(domain, DomainCode):
        if domain.k != k:
            raise InvalidArgument(f"domain code has k={domain.k}, model has k={k}")
        return domain.index
    if isinstance(domain, bool) or not isinstance(domain, int) or not 0 <= domain < k:
        raise InvalidArgument(f"domain {domain!r} outside [0, {k})")
    return domain


def one_hot_batch(index: int, k: int, batch: int, dtype=torch.float32) -> torch.Tensor:
    vec = torch.zeros(batch, k, dtype=dtype)
    vec[:, index] = 1
    return vec


def build_models(hp: Hyperparameters, rng: RngStream) -> ModelSet:
    """Construct every network with parameters drawn from ``rng``."""
    problems = validate_config(hp)
    if problems:
        raise InvalidArgument("; ".join(f"{k}: {v}" for k, v in problems))
    if hp.image_size % DOWNSAMPLE or hp.image_size < 2 * DOWNSAMPLE:
        raise InvalidArgument(
            f"image_size {hp.image_size} must be a multiple of {DOWNSAMPLE} and at least {2 * DOWNSAMPLE}")
    # torch's default initializers draw from the global generator; fork it so the
    # build is a pure function of rng and leaves global state untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(torch.randint(2 ** 62, (1,), generator=rng.generator)))
        models = ModelSet(hp)
    return models


# forward operations with shape/finiteness contracts --------------------------

def _check_images(models: ModelSet, image: torch.Tensor):
    if image.dim() != 4 or tuple(image.shape[1:]) != models.image_shape:
        raise InvalidArgument(f"expected images of shape (N, {models.image_shape}), got {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise InvalidArgument("image contains non-finite values")


def _check_content(models: ModelSet, content: torch.Tensor):
    if content.dim() != 4 or tuple(content.shape[1:]) != models.content_shape:
        raise InvalidArgument(
            f"expected content of shape (N, {models.content_shape}), got {tuple(content.shape)}")
    if not torch.isfinite(content).all():
        raise InvalidArgument("content code contains non-finite values")


def _check_attr(models: ModelSet, attr: torch.Tensor, batch: int):
    if attr.dim() != 2 or attr.shape[1] != models.hp.attribute_dim or attr.shape[0] != batch:
        raise InvalidArgument(
            f"expected attribute of shape ({batch}, {models.hp.attribute_dim}), got {tuple(attr.shape)}")
    if not torch.isfinite(attr).all():
        raise InvalidArgument("attribute code contains non-finite values")


def encode_content(models: ModelSet, image: torch.Tensor, domain) -> torch.Tensor:
    _check_images(models, image)
    return models.content_encoders[models.slot(domain)](image)


def encode_attribute(models: ModelSet, image: torch.Tensor, domain, rng: RngStream | None = None,
                     eps: torch.Tensor | None = None):
    """Return ``(mean, logvar, sample)``.

    ``sample = mean + exp(logvar / 2) * eps``; ``eps`` is drawn from ``rng`` unless
    given explicitly. With neither, ``eps`` is zero and the sample is the mean.
    """
    _check_images(models, image)
    slot = models.slot(domain)
    mean, logvar = models.attribute_encoders[slot](image, models.domain_vec(domain, image.shape[0]))
    if eps is None:
        eps = rng.normal(*mean.shape, dtype=mean.dtype) if rng is not None else torch.zeros_like(mean)
    return mean, logvar, mean + torch.exp(0.5 * logvar) * eps


def generate(models: ModelSet, content: torch.Tensor, attribute: torch.Tensor, domain) -> torch.Tensor:
    _check_content(models, content)
    _check_attr(models, attribute, content.shape[0])
    slot = models.slot(domain)
    return models.generators[slot](content, attribute, models.domain_vec(domain, content.shape[0]))


def generate_multiscale(models: ModelSet, content, attribute, domain):
    """Return ``(full, low)``; ``low`` is a quarter-resolution image from an intermediate layer."""
    if not models.hp.multiscale_enabled:
        raise InvalidState("multiscale branch is disabled in this configuration")
    _check_content(models, content)
    _check_attr(models, attribute, content.shape[0])
    slot = models.slot(domain)
    return models.generators[slot](content, attribute, models.domain_vec(domain, content.shape[0]),
                                   return_low=True)


def discriminate_domain(models: ModelSet, image: torch.Tensor, domain):
    """Return ``(realism_map, class_logits)``; logits are None in dual mode."""
    _check_images(models, image)
    return models.discriminators[models.slot(domain)](image)


def discriminate_low(models: ModelSet, image: torch.Tensor, domain) -> torch.Tensor:
    if not models.hp.multiscale_enabled:
        raise InvalidState("multiscale branch is disabled in this configuration")
    return models.low_discriminators[models.slot(domain)](image)[0]


def discriminate_content(models: ModelSet, content: torch.Tensor) -> torch.Tensor:
    _check_content(models, content)
    return models.content_discriminator(content)
