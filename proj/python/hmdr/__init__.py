"""Video inpainting and 3D face reconstruction for HMD-occluded clips."""

import json

from . import _core
from ._core import (
    FormatError,
    IncompatibleCheckpoint,
    InvalidInput,
    NumericError,
    chamfer,
    dense_lm_loss,
    huber,
    infer,
    infer_clip,
    landmark_configs,
    load_clip,
    mean_hausdorff,
    metric_columns,
    mse,
    prepare,
    psnr,
    rms_error,
    ssim,
    total_loss,
)


def desk_config():
    """Small training preset as a dict."""
    return json.loads(_core.desk_config())


def validate_config(config):
    _core.validate_config(json.dumps(config))


def train(config, data, out, resume=False):
    """Runs both training stages; returns the run manifest as a dict."""
    return json.loads(_core.train(json.dumps(config), str(data), str(out), resume))


def evaluate(pred, gt, checkpoint=None):
    """Averaged metrics keyed by column header."""
    return _core.evaluate(str(pred), str(gt), str(checkpoint) if checkpoint else "")
