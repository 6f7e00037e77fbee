"""Core value types: hyperparameters, domain codes, prior sampling and RNG streams."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


@dataclass
class Hyperparameters:
    lambda_content_adv: float = 1.0
    lambda_cc: float = 10.0
    lambda_domain_adv: float = 1.0
    lambda_recon: float = 10.0
    lambda_latent: float = 10.0
    lambda_kl: float = 0.01
    lambda_ms: float = 1.0
    lambda_domain_cls: float = 1.0
    lambda_content_l1: float = 0.01
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    attribute_dim: int = 8
    image_size: int = 64
    num_domains: int = 2
    multiscale_enabled: bool = False
    # desk-scale extensions
    multi_domain: bool = False
    base_channels: int = 8
    iterations: int = 20000
    checkpoint_every: int = 1000

    @classmethod
    def from_dict(cls, data: dict) -> "Hyperparameters":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "Hyperparameters":
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise InvalidArgument("config file must hold a flat JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **changes) -> "Hyperparameters":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


_LAMBDAS = (
    "lambda_content_adv", "lambda_cc", "lambda_domain_adv", "lambda_recon",
    "lambda_latent", "lambda_kl", "lambda_ms", "lambda_domain_cls", "lambda_content_l1",
)


def validate_config(hp: Hyperparameters) -> list[tuple[str, str]]:
    """Return every violated invariant as ``(field, reason)``; empty means ok."""
    errors = []
    for name in _LAMBDAS:
        value = getattr(hp, name)
        if not _is_real(value) or value < 0:
            errors.append((name, f"must be a finite number >= 0, got {value!r}"))
    if not _is_real(hp.learning_rate) or hp.learning_rate <= 0:
        errors.append(("learning_rate", f"must be > 0, got {hp.learning_rate!r}"))
    for name in ("beta1", "beta2"):
        value = getattr(hp, name)
        if not _is_real(value) or not 0 <= value < 1:
            errors.append((name, f"must lie in [0, 1), got {value!r}"))
    for name, low in (("batch_size", 1), ("attribute_dim", 1), ("num_domains", 2),
                      ("base_channels", 1), ("iterations", 0), ("checkpoint_every", 1)):
        value = getattr(hp, name)
        if not _is_int(value) or value < low:
            errors.append((name, f"must be an integer >= {low}, got {value!r}"))
    if not _is_int(hp.image_size) or hp.image_size < 8:
        errors.append(("image_size", f"must be an integer >= 8, got {hp.image_size!r}"))
    for name in ("multiscale_enabled", "multi_domain"):
        if not isinstance(getattr(hp, name), bool):
            errors.append((name, "must be a boolean"))
    if hp.multi_domain is False and _is_int(hp.num_domains) and hp.num_domains != 2:
        errors.append(("num_domains", "dual-domain mode requires num_domains == 2"))
    return errors


def _is_real(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


class RngStream:
    """Named, seeded random stream backed by a torch CPU generator.

    The generator seed is derived from ``(seed, stream_id)`` so that distinct
    streams of one run never share draws.
    """

    def __init__(self, seed: int, stream_id: str = "default"):
        self.seed = int(seed)
        self.stream_id = stream_id
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream_id.encode())])
        derived = int(ss.generate_state(1, dtype=np.uint64)[0]) & 0x7FFFFFFFFFFFFFFF
        self.generator = torch.Generator().manual_seed(derived)

    def normal(self, *shape: int, dtype=torch.float32) -> torch.Tensor:
        return torch.randn(*shape, generator=self.generator, dtype=dtype)

    def randint(self, high: int, size: tuple = ()) -> torch.Tensor:
        return torch.randint(high, size, generator=self.generator)

    def integer(self, high: int) -> int:
        return int(torch.randint(high, (1,), generator=self.generator))

    def get_state(self) -> torch.Tensor:
        return self.generator.get_state()

    def set_state(self, state: torch.Tensor) -> None:
        self.generator.set_state(state)


def sample_attribute_prior(dim: int, rng: RngStream, n: int | None = None) -> torch.Tensor:
    """Draw attribute vectors from N(0, I); shape ``(dim,)`` or ``(n, dim)``."""
    if not _is_int(dim) or dim < 1:
        raise InvalidArgument(f"attribute dim must be >= 1, got {dim!r}")
    if n is None:
        return rng.normal(dim)
    return rng.normal(n, dim)


@dataclass(frozen=True)
class DomainCode:
    index: int
    k: int
    vector: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not _is_int(self.k) or self.k < 1:
            raise InvalidArgument(f"domain count must be >= 1, got {self.k!r}")
        if not _is_int(self.index) or not 0 <= self.index < self.k:
            raise InvalidArgument(f"domain index {self.index!r} outside [0, {self.k})")
        object.__setattr__(self, "vector", tuple(1.0 if i == self.index else 0.0 for i in range(self.k)))

    def tensor(self, batch: int = 1) -> torch.Tensor:
        return torch.tensor(self.vector).expand(batch, self.k)


def one_hot(index: int, k: int) -> DomainCode:
    return DomainCode(index, k)
