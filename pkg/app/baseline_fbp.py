"""
Filtered Backprojection Baseline for Kernel CT Reconstruction
Ram-Lak filtering by zero-padded FFT and linear-interpolation
backprojection, used for RMSE comparisons
"""

import logging
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from data import Sinogram
from recon import ImageRaster
from utils import InvalidArgumentError, config

logger = logging.getLogger(__name__)


class FbpConfig(BaseModel):
    filter: Literal["ramp"] = "ramp"
    interpolation: Literal["linear"] = "linear"
    padding: int = Field(default=int(config.setting("fbp_settings", "padding", 2)), ge=2)

    @field_validator('padding')
    @classmethod
    def power_of_two(cls, padding: int) -> int:
        if padding & (padding - 1):
            raise ValueError(f"padding factor must be a power of two, got {padding}")
        return padding


def ram_lak_kernel(length: int, spacing: float) -> np.ndarray:
    """Spatial ramp kernel h[k] for k = 0..length-1 with negative lags wrapped to the end"""
    lags = np.arange(length)
    lags = np.where(lags > length // 2, lags - length, lags)
    kernel = np.zeros(length)
    kernel[0] = 1.0 / (4.0 * spacing * spacing)
    odd = (lags % 2) != 0
    kernel[odd] = -1.0 / (np.pi * lags[odd] * spacing) ** 2
    return kernel


def filter_projections(values: np.ndarray, spacing: float, cfg: FbpConfig) -> np.ndarray:
    """Ramp-filter every detector row (linear convolution via zero padding)"""
    n_mesh = values.shape[1]
    length = 1 << int(np.ceil(np.log2(cfg.padding * n_mesh)))
    response = np.fft.fft(ram_lak_kernel(length, spacing))
    spectrum = np.fft.fft(values, n=length, axis=1) * response[None, :]
    return spacing * np.fft.ifft(spectrum, axis=1).real[:, :n_mesh]


def fbp_reconstruct(sino: Sinogram, raster: Union[ImageRaster, int], cfg: Optional[FbpConfig] = None) -> ImageRaster:
    """Planar parallel-beam FBP on the raster's pixel centers"""
    cfg = cfg or FbpConfig()
    if sino.mesh.dim != 2:
        raise InvalidArgumentError("filtered backprojection is planar only")
    if isinstance(raster, int):
        raster = ImageRaster.blank(raster)
    offsets = sino.mesh.offsets()
    if offsets.size > 1 and np.any(np.diff(offsets) <= 0.0):
        raise InvalidArgumentError("detector offsets must be increasing")
    spacing = float(offsets[1] - offsets[0]) if offsets.size > 1 else 2.0

    filtered = filter_projections(sino.values, spacing, cfg)
    points = raster.points()[raster.mask]
    image = np.zeros(points.shape[0])
    for angle, row in zip(sino.angle_grid.as_array(), filtered):
        s = np.cos(angle) * points[:, 0] - np.sin(angle) * points[:, 1]
        image += np.interp(s, offsets, row, left=0.0, right=0.0)
    image *= np.pi / sino.angle_grid.n_angles

    values = np.zeros((raster.side, raster.side))
    values[raster.mask] = image
    logger.info(f"FBP on {sino.shape[0]} angles x {sino.shape[1]} detectors -> {raster.side}x{raster.side}")
    return raster.with_values(values)
