import math

import numpy as np
import pytest
import torch

from conftest import check_gradient
from sgin.pngio import NUM_REGIONS
from sgin.segmenter import (
    SegmenterModel,
    SemanticsError,
    segment,
    segmenter_loss,
    validate_semantics,
)


class _FixedLogits(torch.nn.Module):
    num_classes = NUM_REGIONS

    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1, -1, -1)


def test_segment_argmax_channel():
    logits = torch.zeros(1, NUM_REGIONS, 4, 4)
    logits[:, 9] = 5.0
    onehot, _ = segment(_FixedLogits(logits), torch.zeros(1, 3, 4, 4))
    assert (onehot[:, 9] == 1).all()
    assert (onehot.sum(dim=1) == 1).all()


def test_segment_tie_goes_to_lowest_index():
    logits = torch.ones(1, NUM_REGIONS, 4, 4)
    onehot, _ = segment(_FixedLogits(logits), torch.zeros(1, 3, 4, 4))
    assert (onehot[:, 0] == 1).all()


def test_untrained_model_output_is_one_hot():
    torch.manual_seed(0)
    model = SegmenterModel(resolution=32, base_channels=8)
    onehot, logits = segment(model, torch.rand(2, 3, 32, 32) * 2 - 1)
    assert onehot.shape == (2, NUM_REGIONS, 32, 32)
    assert logits.shape == (2, NUM_REGIONS, 32, 32)
    assert (onehot.sum(dim=1) == 1).all()
    for b in range(2):
        validate_semantics(onehot[b].permute(1, 2, 0).numpy())


def test_model_rejects_wrong_resolution():
    model = SegmenterModel(resolution=64, base_channels=8)
    with pytest.raises(ValueError, match="resolution mismatch"):
        model(torch.zeros(1, 3, 16, 16))


def test_segment_squeeze_single_image():
    torch.manual_seed(0)
    model = SegmenterModel(resolution=32, base_channels=8)
    onehot, logits = segment(model, torch.rand(3, 32, 32))
    assert onehot.shape == (NUM_REGIONS, 32, 32)


# ------------------------------------------------------ validate_semantics

def test_validate_ok():
    L = np.zeros((5, 5, NUM_REGIONS), np.uint8)
    L[..., 2] = 1
    validate_semantics(L)  # no raise


def test_validate_two_channels_set():
    L = np.zeros((5, 5, NUM_REGIONS), np.uint8)
    L[..., 0] = 1
    L[2, 3, 4] = 1
    with pytest.raises(SemanticsError, match=r"not one-hot at pixel \(2,3\)"):
        validate_semantics(L)


def test_validate_zero_channels_set():
    L = np.zeros((5, 5, NUM_REGIONS), np.uint8)
    L[..., 1] = 1
    L[4, 1] = 0
    with pytest.raises(SemanticsError, match=r"\(4,1\)"):
        validate_semantics(L)


def test_validate_non_binary_values():
    L = np.zeros((2, 2, NUM_REGIONS), np.float32)
    L[..., 0] = 0.5
    L[..., 1] = 0.5
    with pytest.raises(SemanticsError, match="not one-hot"):
        validate_semantics(L)


def test_validate_wrong_channel_count():
    with pytest.raises(SemanticsError, match="expected"):
        validate_semantics(np.zeros((4, 4, 5)))


# -------------------------------------------------------- segmenter_loss

def test_loss_uniform_logits_is_log_c():
    logits = torch.zeros(2, NUM_REGIONS, 6, 6)
    target = torch.zeros_like(logits)
    target[:, 3] = 1
    assert abs(segmenter_loss(logits, target).item() - math.log(NUM_REGIONS)) < 1e-6


def test_loss_confident_correct_near_zero():
    target = torch.zeros(1, NUM_REGIONS, 4, 4)
    target[:, 7] = 1
    logits = target * 1e4
    assert segmenter_loss(logits, target).item() < 1e-3


def test_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        segmenter_loss(torch.zeros(1, NUM_REGIONS, 4, 4), torch.zeros(1, NUM_REGIONS, 4, 5))


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    target = torch.zeros(NUM_REGIONS, 8, 8, dtype=torch.float64)
    idx = torch.randint(0, NUM_REGIONS, (8, 8))
    target.scatter_(0, idx.unsqueeze(0), 1.0)
    logits = torch.randn(NUM_REGIONS, 8, 8, dtype=torch.float64, requires_grad=True)
    check_gradient(lambda: segmenter_loss(logits, target), [logits], tol=1e-3, max_coords=120)
