"""Hand-built montages and tiny constructions shared across test modules."""

import numpy as np

from hdnirs import Montage


def build_pairs(sites, separation=30.0, wavelengths=(680.0, 850.0)):
    """One source-detector pair per (x, y) site, stacked along y.

    Channels are emitted pair by pair, low wavelength first.
    """
    sites = np.asarray(sites, float)
    n = len(sites)
    sources = np.column_stack([sites[:, 0], sites[:, 1] - separation / 2.0,
                               np.zeros(n)])
    detectors = np.column_stack([sites[:, 0], sites[:, 1] + separation / 2.0,
                                 np.zeros(n)])
    return Montage(
        sources=sources,
        detectors=detectors,
        channel_source=np.repeat(np.arange(n), 2),
        channel_detector=np.repeat(np.arange(n), 2),
        channel_wavelength=np.tile(np.asarray(wavelengths, float), n),
        source_module=np.zeros(n, int),
        detector_module=np.zeros(n, int),
    )
