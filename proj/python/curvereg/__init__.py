"""Python bindings for the curvereg PET-CT key-curve registration library.

JSON documents cross the boundary as dicts; volumes come back as float32 arrays indexed (z, y, x).
Library errors raise CurveregError with args (kind, message).
"""

import json
from dataclasses import dataclass

import numpy as np

from . import _core
from ._core import CurveregError

__all__ = ["CurveregError", "Volume", "fit", "rmse", "lcka", "load_volume", "make_phantom", "run_cli"]


@dataclass
class Volume:
    geometry: dict
    channels: dict

    @property
    def shape(self):
        return tuple(reversed(self.geometry["dims"]))


def _volume(d):
    return Volume(json.loads(d["geometry"]), dict(d["channels"]))


def run_cli(*args):
    """Runs a subcommand as the `curvereg` tool would; returns (exit code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])


def fit(annotations):
    return json.loads(_core.fit(json.dumps(annotations)))


def rmse(src_curves, tgt_curves, n_samples=64):
    return json.loads(_core.rmse(json.dumps(src_curves), json.dumps(tgt_curves), n_samples))


def lcka(a, b):
    return _core.lcka(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def load_volume(path):
    return _volume(_core.load_volume(str(path)))


def make_phantom(**spec):
    """Phantom volume, analytic curves and annotation document for PhantomSpec fields."""
    d = _core.make_phantom(json.dumps(spec))
    return _volume(d), json.loads(d["curves"]), json.loads(d["annotations"])
