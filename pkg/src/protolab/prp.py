"""Model-aware prototype relevance backpropagation.

Instead of bilinearly upsampling a similarity map, the pooled similarity score
of a prototype is redistributed backwards through the network that produced it:
initialized on the argmax latent patch (split across channels proportionally to
each channel's squared-difference contribution to the distance), passed through
convolutions with the z+ rule, through max-pooling by winner-take-all, through
elementwise nonlinearities unchanged, and through the pixel layer with a
bounded-input rule for [0,1] images. Every rule is looked up in a registry, so
alternative rule assignments can be tested without touching the walker.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .explain import Heatmap

_STAB = 1e-12


def _flat_fallback(layer: nn.Conv2d, a_in: torch.Tensor, dead_r: torch.Tensor) -> torch.Tensor:
    """Flat-rule redistribution for outputs with no positive contributions.

    Relevance landing on a unit whose denominator vanished is spread uniformly
    over the unit's receptive field, which keeps the layer exactly conserving
    and nonnegative.
    """
    ones_w = torch.ones_like(layer.weight)
    counts = F.conv2d(torch.ones_like(a_in), ones_w, bias=None,
                      stride=layer.stride, padding=layer.padding)
    s = dead_r / counts
    return F.conv_transpose2d(s, ones_w, bias=None, stride=layer.stride,
                              padding=layer.padding)


def zplus_rule(layer: nn.Conv2d, a_in: torch.Tensor, r_out: torch.Tensor) -> torch.Tensor:
    """z+ rule: redistribute along positive-weight contributions, bias ignored.

    Dead outputs (zero positive-contribution sum) fall back to the flat rule so
    no relevance is silently dropped.
    """
    w_pos = layer.weight.clamp(min=0.0)
    z = F.conv2d(a_in, w_pos, bias=None, stride=layer.stride, padding=layer.padding)
    live = z > 0
    s = torch.where(live, r_out / (z + _STAB), torch.zeros_like(r_out))
    c = F.conv_transpose2d(s, w_pos, bias=None, stride=layer.stride, padding=layer.padding)
    relevance = a_in * c
    dead_r = torch.where(live, torch.zeros_like(r_out), r_out)
    if bool((dead_r > 0).any()):
        relevance = relevance + _flat_fallback(layer, a_in, dead_r)
    return relevance


def zb_rule(layer: nn.Conv2d, a_in: torch.Tensor, r_out: torch.Tensor,
            low: float = 0.0, high: float = 1.0) -> torch.Tensor:
    """Bounded-input rule for the pixel layer; nonnegative for inputs in [low, high]."""
    w = layer.weight
    w_pos = w.clamp(min=0.0)
    w_neg = w.clamp(max=0.0)
    lo = torch.full_like(a_in, low)
    hi = torch.full_like(a_in, high)
    z = (
        F.conv2d(a_in, w, bias=None, stride=layer.stride, padding=layer.padding)
        - F.conv2d(lo, w_pos, bias=None, stride=layer.stride, padding=layer.padding)
        - F.conv2d(hi, w_neg, bias=None, stride=layer.stride, padding=layer.padding)
    )
    live = z > 0
    s = torch.where(live, r_out / (z + _STAB), torch.zeros_like(r_out))

    def back(t, weight):
        return F.conv_transpose2d(t, weight, bias=None, stride=layer.stride,
                                  padding=layer.padding)

    relevance = a_in * back(s, w) - lo * back(s, w_pos) - hi * back(s, w_neg)
    dead_r = torch.where(live, torch.zeros_like(r_out), r_out)
    if bool((dead_r > 0).any()):
        relevance = relevance + _flat_fallback(layer, a_in, dead_r)
    return relevance


def winner_take_all_rule(layer: nn.MaxPool2d, a_in: torch.Tensor,
                         r_out: torch.Tensor) -> torch.Tensor:
    """Route pooled relevance entirely onto the argmax input of each window."""
    _, idx = F.max_pool2d(a_in, layer.kernel_size, layer.stride, layer.padding,
                          return_indices=True)
    return F.max_unpool2d(r_out, idx, layer.kernel_size, layer.stride, layer.padding,
                          output_size=a_in.shape[-2:])


def passthrough_rule(layer: nn.Module, a_in: torch.Tensor,
                     r_out: torch.Tensor) -> torch.Tensor:
    """Elementwise nonlinearities keep their relevance untouched."""
    return r_out


DEFAULT_RULES = {
    "conv": zplus_rule,
    "input_conv": zb_rule,
    "pool": winner_take_all_rule,
    "pass": passthrough_rule,
}


def _fuse_conv_bn(conv: nn.Conv2d, bn: nn.BatchNorm2d) -> nn.Conv2d:
    """Fold eval-mode batchnorm into the preceding convolution (canonization).

    The fused layer computes exactly bn(conv(x)) with running statistics, which
    lets the plain conv rules apply.
    """
    scale = bn.weight / torch.sqrt(bn.running_var + bn.eps)
    fused = nn.Conv2d(
        conv.in_channels, conv.out_channels, conv.kernel_size,
        stride=conv.stride, padding=conv.padding, bias=True,
    )
    with torch.no_grad():
        fused.weight.copy_(conv.weight * scale[:, None, None, None])
        bias = torch.zeros_like(bn.running_mean) if conv.bias is None else conv.bias
        fused.bias.copy_((bias - bn.running_mean) * scale + bn.bias)
    return fused


def _classify_layers(net: nn.Sequential) -> list[tuple[str, nn.Module]]:
    """Canonized [role, layer] walk: conv+bn pairs fused, rules assigned by role."""
    roles: list[tuple[str, nn.Module]] = []
    seen_conv = False
    layers = list(net)
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, nn.Conv2d):
            if i + 1 < len(layers) and isinstance(layers[i + 1], nn.BatchNorm2d):
                layer = _fuse_conv_bn(layer, layers[i + 1])
                i += 1
            roles.append(("conv" if seen_conv else "input_conv", layer))
            seen_conv = True
        elif isinstance(layer, nn.MaxPool2d):
            roles.append(("pool", layer))
        elif isinstance(layer, (nn.ReLU, nn.Sigmoid)):
            roles.append(("pass", layer))
        else:
            raise ValueError(f"no relevance rule for layer type {type(layer).__name__}")
        i += 1
    return roles


def _initial_relevance(z: torch.Tensor, prototype: torch.Tensor, epsilon: float):
    """Pooled similarity placed on the argmax patch, split by channel contribution."""
    d_map = ((z - prototype[None, :, None, None]) ** 2).sum(dim=1)  # (1, H, W)
    sim = torch.log((d_map + 1.0) / (d_map + epsilon))
    flat = int(sim[0].reshape(-1).argmax())
    h, w = sim.shape[-2:]
    r, c = divmod(flat, w)
    pooled = float(sim[0, r, c])

    contrib = (z[0, :, r, c] - prototype) ** 2
    total = float(contrib.sum())
    if total > 0:
        split = contrib / total
    else:
        split = torch.full_like(contrib, 1.0 / len(contrib))
    relevance = torch.zeros_like(z)
    relevance[0, :, r, c] = pooled * split
    return relevance, pooled, (int(r), int(c))


@torch.no_grad()
def prp_relevance(model, prototype_id: int, image: torch.Tensor,
                  rules: dict | None = None, image_id: int | None = None,
                  return_audit: bool = False):
    """Backpropagate one prototype's pooled similarity to the pixels of one image.

    image: float tensor (3, 128, 128) in [0,1]. Returns a nonnegative Heatmap;
    with return_audit=True also a per-layer list of (name, relevance sum) for
    conservation checks.
    """
    if not 0 <= prototype_id < model.num_prototypes:
        raise IndexError(f"prototype id {prototype_id} out of range")
    rule_table = {**DEFAULT_RULES, **(rules or {})}

    model.eval()  # canonization assumes running batchnorm statistics
    x = image.unsqueeze(0)
    roles = _classify_layers(model.extractor.net)

    # forward, keeping each layer's input
    activations = []
    a = x
    for _, layer in roles:
        activations.append(a)
        a = layer(a)
    z = a  # latent map

    relevance, pooled, _patch = _initial_relevance(
        z, model.prototypes[prototype_id], model.epsilon
    )
    audit = [("init", float(relevance.sum()))]

    for (role, layer), a_in in zip(reversed(roles), reversed(activations)):
        relevance = rule_table[role](layer, a_in, relevance)
        audit.append((f"{type(layer).__name__.lower()}", float(relevance.sum())))

    heat = relevance[0].sum(dim=0).numpy().astype(np.float64)
    heatmap = Heatmap(heat, "prp", prototype_id, image_id)
    if return_audit:
        return heatmap, audit
    return heatmap


def conservation_ratios(audit: list[tuple[str, float]]) -> list[float]:
    """Relevance retained per step, relative to the initialized amount."""
    base = audit[0][1]
    if base == 0:
        return [1.0 for _ in audit[1:]]
    return [s / base for _, s in audit[1:]]
