"""Run configuration: one INI-style file governs the whole pipeline.

Two built-in profiles: ``desk`` (the default; everything scaled to run
on a laptop in minutes) and ``full`` (production-size counts: 3000-epoch
stage-1 training, 20k/4k and 10k/2k record sets, 100k-path Monte Carlo).
CLI flags override file values; file values override the profile.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import DomainError, ParseError
from .market_data import K_MAX, K_MIN, N_K, N_T, T_MAX, T_MIN
from .price_mlp import KINDS


@dataclass
class RunConfig:
    # [run]
    seed: int = 7
    data_dir: str = "data"
    model_dir: str = "models"
    out_dir: str = "out"
    # [grid]
    n_k: int = N_K
    n_t: int = N_T
    k_min: float = K_MIN
    k_max: float = K_MAX
    t_min: float = T_MIN
    t_max: float = T_MAX
    # [vae]
    latent_dim: int = 10
    vae_epochs: int = 300
    vae_batch_size: int = 32
    n_recon_samples: int = 10
    vae_lr_max: float = 1e-3
    vae_lr_min: float = 1e-6
    kl_beta: float = 0.0
    standardize: bool = False
    # [mlp]
    mlp_epochs: int = 100
    fine_tune_epochs: int = 25
    mlp_batch_size: int = 32
    mlp_lr_max: float = 1e-3
    mlp_lr_min: float = 1e-6
    ft_lr_max: float = 1e-4
    ft_lr_min: float = 1e-7
    mlp_hidden: tuple[int, ...] = (64, 64, 32)
    # [oracle]
    n_paths: int = 20_000
    n_observations: int = 50
    n_steps: int = 800
    antithetic: bool = True
    rate: float = 0.03
    # [dataset]
    n_surfaces: int = 200
    train_fraction: float = 0.8
    records: dict[str, tuple[int, int]] = field(default_factory=lambda: {
        "american_put": (2000, 500),
        "asian_call": (2000, 500),
        "asian_put": (2000, 500),
    })

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise DomainError("latent_dim must be >= 1")
        for name in ("vae_epochs", "mlp_epochs", "fine_tune_epochs"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if (self.n_k, self.n_t) != (N_K, N_T):
            raise DomainError(f"grid must be {N_K}x{N_T}")
        if (self.k_min, self.k_max) != (K_MIN, K_MAX):
            raise DomainError(f"k range must be [{K_MIN}, {K_MAX}]")
        if (self.t_min, self.t_max) != (T_MIN, T_MAX):
            raise DomainError(f"T range must be [{T_MIN}, {T_MAX}]")
        if not 0 < self.train_fraction < 1:
            raise DomainError("train_fraction must be in (0, 1)")
        if set(self.records) != set(KINDS):
            raise DomainError(f"records must cover kinds {KINDS}")
        for kind, (n_train, n_test) in self.records.items():
            if n_train < 0 or n_test < 0:
                raise DomainError(f"negative record count for {kind}")
        if self.n_surfaces < 2:
            raise DomainError("n_surfaces must be >= 2")

    @classmethod
    def desk(cls) -> "RunConfig":
        """Desk-scale defaults, roughly 10x below the full-size run."""
        return cls()

    @classmethod
    def full(cls) -> "RunConfig":
        """Full-size profile: 3000/150/50 training epochs, 20k/4k
        American put records and 10k/2k per Asian kind, 100k MC paths."""
        return cls(
            vae_epochs=3000,
            mlp_epochs=150,
            fine_tune_epochs=50,
            n_paths=100_000,
            n_surfaces=1051,
            records={
                "american_put": (20_000, 4_000),
                "asian_call": (10_000, 2_000),
                "asian_put": (10_000, 2_000),
            },
        )

    def resolve_paths(self, base: Path) -> "RunConfig":
        """Anchor relative directories at `base`."""
        def anchor(p: str) -> str:
            path = Path(p)
            return str(path if path.is_absolute() else base / path)
        return replace(self, data_dir=anchor(self.data_dir),
                       model_dir=anchor(self.model_dir),
                       out_dir=anchor(self.out_dir))


_SECTIONS = {
    "run": ["seed", "data_dir", "model_dir", "out_dir"],
    "grid": ["n_k", "n_t", "k_min", "k_max", "t_min", "t_max"],
    "vae": ["latent_dim", "vae_epochs", "vae_batch_size", "n_recon_samples",
            "vae_lr_max", "vae_lr_min", "kl_beta", "standardize"],
    "mlp": ["mlp_epochs", "fine_tune_epochs", "mlp_batch_size", "mlp_lr_max",
            "mlp_lr_min", "ft_lr_max", "ft_lr_min", "mlp_hidden"],
    "oracle": ["n_paths", "n_observations", "n_steps", "antithetic", "rate"],
    "dataset": ["n_surfaces", "train_fraction"],
}


def load_config(path: str | Path, profile: str = "desk") -> RunConfig:
    """Parse an INI config on top of the chosen profile."""
    base = RunConfig.full() if profile == "full" else RunConfig.desk()
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise ParseError(f"cannot read config file {path}")
    types = {f.name: f.type for f in fields(RunConfig)}
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in keys:
            if not parser.has_option(section, key):
                continue
            raw = parser.get(section, key)
            try:
                setattr(base, key, _convert(key, raw, types[key]))
            except ValueError as exc:
                raise ParseError(f"{path}: [{section}] {key}: {exc}") from exc
    if parser.has_section("records"):
        for kind in parser.options("records"):
            if kind not in KINDS:
                raise ParseError(f"{path}: unknown record kind {kind!r}")
            parts = [p.strip() for p in parser.get("records", kind).split(",")]
            if len(parts) != 2:
                raise ParseError(f"{path}: records entries are 'train,test'")
            base.records[kind] = (int(parts[0]), int(parts[1]))
    base.validate()
    return base


def _convert(key: str, raw: str, type_name: str):
    raw = raw.strip()
    if key == "mlp_hidden":
        return tuple(int(p) for p in raw.split(",") if p.strip())
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def write_config(config: RunConfig, path: str | Path) -> None:
    """Emit the config in the same INI layout load_config reads."""
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(config, key)
            if key == "mlp_hidden":
                value = ",".join(str(v) for v in value)
            parser[section][key] = str(value)
    parser["records"] = {kind: f"{tr},{te}"
                         for kind, (tr, te) in config.records.items()}
    with Path(path).open("w") as fh:
        parser.write(fh)
