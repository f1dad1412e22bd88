"""Volatility-surface construction, VAE compression, and neural pricing
of American puts and arithmetic Asian options, with in-repo lattice and
Monte Carlo oracles as ground truth."""

from .config import RunConfig, load_config
from .errors import (
    ConvergenceError,
    CoverageError,
    DomainError,
    GenerationError,
    NoSolutionError,
    NumericError,
    ParseError,
    ShapeError,
    StateError,
    VolPricerError,
)
from .market_data import (
    OptionQuote,
    SurfaceDataset,
    VolSurface,
    bs_price,
    build_surface,
    check_arbitrage,
    implied_vol,
    split_dataset,
)
from .oracle_pricers import (
    McConfig,
    PricingRequest,
    american_put,
    asian_arithmetic,
    generate_price_dataset,
    geometric_asian_closed_form,
    surface_vol_at,
)
from .price_mlp import (
    KINDS,
    PriceRecord,
    PricerModel,
    evaluate_records,
    fine_tune,
    mlp_loss,
    mlp_price,
    predict_price,
    train_mlp,
)
from .surface_analysis import (
    SurfaceMatrix,
    SvdResult,
    assemble_matrix,
    compute_svd,
    explained_spectrum,
)
from .synthetic import SviSlice, generate_surfaces, make_dataset, svi_surface
from .tensor_nn import AdamState, CosineSchedule, adam_step, cosine_lr
from .vae import LatentStats, VaeModel, encode, reconstruct, reparameterize, train_vae, vae_loss

__version__ = "0.1.0"
