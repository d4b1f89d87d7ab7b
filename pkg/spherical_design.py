"""
Point sets on the unit sphere for quadrature over viewing directions.

A spherical t-design is a set of points whose plain average integrates every
spherical harmonic of degree 1..t to zero. The desk-scale 36-point set is an
embedded closed-form table. Other tables are read from the `designs/`
directory beside this module; a missing table is solved with scipy's
least-squares solver from a Fibonacci lattice and cached on disk.

Regenerate a table with:
    python -m spherical_design 100 13
"""
import argparse
import logging
import os
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.optimize
from scipy.special import sph_harm_y

import numcore

logger = logging.getLogger(__name__)

# q1 -> design degree t
KNOWN_DESIGNS = {100: 13, 36: 5}
DESIGN_TOL = 1e-10
CACHE_ENV = "ORBIT_MOMENTS_CACHE"
DESIGN_DIR = Path(__file__).resolve().parent / "designs"

# Equal-weight (Chebyshev) 4-node rule on [-1, 1]: nodes solve x^4 - 2x^2/3 + 1/45 = 0
# and integrate x^0..x^5 exactly.
RING_HEIGHTS = tuple(
    sign * np.sqrt(1.0 / 3.0 + off * 2.0 / (3.0 * np.sqrt(5.0)))
    for sign in (-1.0, 1.0) for off in (1.0, -1.0)
)
RING_POINTS = 9


def fibonacci_sphere(count: int) -> np.ndarray:
    """Golden-angle spiral lattice, (count, 3) unit vectors."""
    if count < 1:
        raise ValueError(f"need at least one point, got {count}")
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def to_angles(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors -> (polar, azimuth)."""
    polar = np.arccos(np.clip(points[:, 2], -1.0, 1.0))
    azimuth = np.arctan2(points[:, 1], points[:, 0])
    return polar, azimuth


def from_angles(polar: np.ndarray, azimuth: np.ndarray) -> np.ndarray:
    s = np.sin(polar)
    return np.stack([s * np.cos(azimuth), s * np.sin(azimuth), np.cos(polar)], axis=1)


def real_harmonics(polar: np.ndarray, azimuth: np.ndarray, degree: int) -> np.ndarray:
    """
    Real spherical harmonics of degrees 1..degree at the given angles.

    Returns:
        ((degree + 1)**2 - 1, count) array, one row per (l, m)
    """
    rows = []
    for l in range(1, degree + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), polar, azimuth)
            if m > 0:
                rows.append(np.sqrt(2.0) * y.real)
            elif m < 0:
                rows.append(np.sqrt(2.0) * y.imag)
            else:
                rows.append(y.real)
    return np.array(rows)


def harmonic_residual(points: np.ndarray, degree: int) -> float:
    """Largest |mean of Y_lm| over 1 <= l <= degree (zero for an exact design)."""
    polar, azimuth = to_angles(points)
    return float(np.max(np.abs(real_harmonics(polar, azimuth, degree).mean(axis=1))))


def solve_design(count: int, degree: int, max_nfev: int = 4000) -> np.ndarray:
    """
    Least-squares solve of the degree-t moment equations for `count` points.

    Logs a warning when the solver stops above DESIGN_TOL; the returned set
    is then an approximate design.
    """
    polar0, azimuth0 = to_angles(fibonacci_sphere(count))

    def residual(x: np.ndarray) -> np.ndarray:
        polar, azimuth = x[:count], x[count:]
        return real_harmonics(polar, azimuth, degree).mean(axis=1)

    result = scipy.optimize.least_squares(
        residual, np.concatenate([polar0, azimuth0]), method="trf",
        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev,
    )
    points = from_angles(result.x[:count], result.x[count:])
    err = harmonic_residual(points, degree)
    if err > DESIGN_TOL:
        logger.warning("Design solve for %d points / degree %d stopped at residual %.3e",
                       count, degree, err)
    else:
        logger.debug("Solved %d-point %d-design (residual %.3e)", count, degree, err)
    return points


def ring_design() -> np.ndarray:
    """
    Embedded 36-point 5-design: four rings at RING_HEIGHTS with RING_POINTS
    equispaced azimuths each, odd rings turned by half a step.

    Exact because the azimuth sums cancel every order 0 < |m| < RING_POINTS and
    the ring heights integrate the zonal harmonics up to degree 5.
    """
    rings = []
    for r, z in enumerate(RING_HEIGHTS):
        phi = 2.0 * np.pi * (np.arange(RING_POINTS) + 0.5 * (r % 2)) / RING_POINTS
        radius = np.sqrt(1.0 - z * z)
        rings.append(np.stack([radius * np.cos(phi), radius * np.sin(phi), np.full(RING_POINTS, z)], axis=1))
    return np.concatenate(rings)


EMBEDDED_DESIGNS = {(36, 5): ring_design}


def _cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path.home() / ".cache" / "orbit-moments"


def table_name(count: int, degree: int) -> str:
    return f"design_{count}_{degree}.omt"


def _read_table(path: Path, count: int, degree: int) -> np.ndarray | None:
    if not path.exists():
        return None
    try:
        points, _ = numcore.read_tensor(path)
    except OSError:
        logger.warning("Ignoring unreadable design table %s", path)
        return None
    if points.shape != (count, 3) or harmonic_residual(points, degree) > DESIGN_TOL:
        logger.warning("Ignoring design table %s: not a %d-point %d-design", path, count, degree)
        return None
    return points


def write_table(points: np.ndarray, degree: int, directory: Path = DESIGN_DIR) -> Path:
    """Store a design as an OMT1 table under `directory`."""
    return numcore.write_tensor(Path(directory) / table_name(len(points), degree), points,
                                {"count": len(points), "degree": degree,
                                 "residual": harmonic_residual(points, degree)})


@lru_cache(maxsize=None)
def design_points(count: int) -> tuple[np.ndarray, int | None]:
    """
    Viewing directions for a q1-point quadrature.

    Lookup order for the q1 values in KNOWN_DESIGNS: embedded table, table
    in DESIGN_DIR, on-disk cache, then a least-squares solve (cached when it
    reaches DESIGN_TOL).

    Returns:
        (points, degree): degree is None when the set is not an exact design,
        which covers the Fibonacci lattice used for other q1 values and a
        solve that stopped above DESIGN_TOL
    """
    degree = KNOWN_DESIGNS.get(count)
    if degree is None:
        logger.info("No %d-point design available, using a Fibonacci lattice", count)
        return fibonacci_sphere(count), None
    build = EMBEDDED_DESIGNS.get((count, degree))
    if build is not None:
        return build(), degree
    for directory in (DESIGN_DIR, _cache_dir()):
        points = _read_table(directory / table_name(count, degree), count, degree)
        if points is not None:
            return points, degree
    points = solve_design(count, degree)
    if harmonic_residual(points, degree) > DESIGN_TOL:
        return points, None
    try:
        write_table(points, degree, _cache_dir())
    except OSError as e:
        logger.debug("Could not cache design at %s: %s", _cache_dir(), e)
    return points, degree


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Solve a spherical design and store it as a table")
    parser.add_argument("count", type=int)
    parser.add_argument("degree", type=int)
    parser.add_argument("--out", type=Path, default=DESIGN_DIR)
    parser.add_argument("--max-nfev", type=int, default=4000)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    pts = solve_design(args.count, args.degree, args.max_nfev)
    residual = harmonic_residual(pts, args.degree)
    if residual > DESIGN_TOL:
        raise SystemExit(f"residual {residual:.3e} above {DESIGN_TOL:g}, table not written")
    logger.info("Wrote %s", write_table(pts, args.degree, args.out))
