"""Builders for the bundled 3D-ResAttNet layer graphs.

The graphs are cost-model descriptions only. Every Conv block (3x3x3
convolution, batch norm, ReLU) carries a ``block`` label so the
one-partition-per-Conv-block layout can be checked against the partitioner.
Residual shortcuts are identity connections and are not listed as layers.
"""

from __future__ import annotations

from .model_graph import LayerSpec, NetworkSpec

INPUT_SHAPE = (96, 112, 96)
STAGE_CHANNELS = (32, 64, 128, 256)
# Volumes are downsampled in H and W only between stages, which keeps the
# per-convolution cost within a factor of two across the network.
STAGE_STRIDES = ((1, 1, 1), (1, 2, 2), (1, 2, 2), (1, 2, 2))
BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
ATTENTION_KEY_CHANNELS = 16
NUM_CLASSES = 2


def _shrink(shape, stride):
    return tuple(-(-s // k) for s, k in zip(shape, stride))


class _Builder:
    def __init__(self):
        self.layers = []

    def add(self, kind, **fields):
        self.layers.append(dict(kind=kind, **fields))

    def conv_block(self, label, c_in, c_out, shape):
        self.add(
            "conv3d",
            name=f"{label}.conv",
            block=label,
            in_channels=c_in,
            out_channels=c_out,
            spatial=shape,
            kernel=(3, 3, 3),
            param_count=c_out * c_in * 27 + c_out,
        )
        self.add("batchnorm", name=f"{label}.bn", block=label, out_channels=c_out, spatial=shape, param_count=2 * c_out)
        self.add("relu", name=f"{label}.relu", block=label, out_channels=c_out, spatial=shape)

    def build(self, name):
        layers = [LayerSpec(index=i, **fields) for i, fields in enumerate(self.layers, start=1)]
        return NetworkSpec(name=name, layers=tuple(layers))


def resattnet(depth: int = 18) -> NetworkSpec:
    if depth not in BLOCKS:
        raise ValueError(f"depth must be one of {sorted(BLOCKS)}")
    b = _Builder()
    shape = INPUT_SHAPE
    b.conv_block("stem", 1, STAGE_CHANNELS[0], shape)
    shape = _shrink(shape, (4, 4, 4))
    b.add("pool", name="stem.pool", out_channels=STAGE_CHANNELS[0], spatial=shape)

    c_in = STAGE_CHANNELS[0]
    for stage, (c_out, stride, count) in enumerate(zip(STAGE_CHANNELS, STAGE_STRIDES, BLOCKS[depth]), start=1):
        shape = _shrink(shape, stride)
        for block in range(1, count + 1):
            b.conv_block(f"layer{stage}.{block}a", c_in, c_out, shape)
            b.conv_block(f"layer{stage}.{block}b", c_out, c_out, shape)
            c_in = c_out
        if stage == 3:
            # residual self-attention over the stage-3 feature map
            b.add(
                "attention",
                name="attention",
                in_channels=c_out,
                out_channels=ATTENTION_KEY_CHANNELS,
                spatial=shape,
                param_count=3 * c_out * ATTENTION_KEY_CHANNELS + ATTENTION_KEY_CHANNELS * c_out + 1,
            )

    b.add("pool", name="gap", out_channels=c_in, spatial=(1, 1, 1))
    b.add("dense", name="fc", in_channels=c_in, out_channels=NUM_CLASSES, param_count=c_in * NUM_CLASSES + NUM_CLASSES)
    b.add("softmax", name="softmax", out_channels=NUM_CLASSES, spatial=(1, 1, 1))
    return b.build(f"3d-resattnet{depth}")


def network_to_dict(net: NetworkSpec) -> dict:
    layers = []
    for layer in net.layers:
        entry = {"index": layer.index, "kind": layer.kind}
        if layer.name:
            entry["name"] = layer.name
        if layer.block is not None:
            entry["block"] = layer.block
        for key in ("in_channels", "out_channels"):
            if getattr(layer, key) is not None:
                entry[key] = getattr(layer, key)
        for key in ("spatial", "kernel"):
            if getattr(layer, key) is not None:
                entry[key] = list(getattr(layer, key))
        entry["param_count"] = layer.param_count
        layers.append(entry)
    return {"name": net.name, "layers": layers}
