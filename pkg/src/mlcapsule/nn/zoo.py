"""Architecture builders for benchmarks and tests.

VGG-16 and MobileNet (v1) are built from their published layer tables with a
width divisor and input size so they can be scaled down to desk size. Batch
norm is assumed folded into the convolutions; MobileNet's global average pool
is replaced by a max pool because the engine has no average pool.
"""

from __future__ import annotations

from .model import RELU, SOFTMAX, ModelDef, conv2d, dense, depthwise_conv2d, maxpool

VGG16_BLOCKS = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]
MOBILENET_BLOCKS = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
                    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1)]


def detector_cnn(input_shape=(1, 28, 28), classes: int = 2) -> ModelDef:
    """conv(5x5,10) - max 2 - conv(5x5,20) - max 2 - FC 50 - FC classes - softmax."""
    return ModelDef(tuple(input_shape), (
        conv2d(10, 5), RELU, maxpool(2),
        conv2d(20, 5), RELU, maxpool(2),
        dense(50), RELU, dense(classes), SOFTMAX), classes)


def detector_mlp(input_shape=(1, 28, 28), hidden: int = 50, classes: int = 2) -> ModelDef:
    """Dense-only variant of the detector head, trainable by ``train_toy``."""
    return ModelDef(tuple(input_shape), (dense(hidden), RELU, dense(classes), SOFTMAX), classes)


def mlp(inputs: int, hidden: tuple[int, ...], classes: int) -> ModelDef:
    layers = []
    for h in hidden:
        layers += [dense(h), RELU]
    layers += [dense(classes), SOFTMAX]
    return ModelDef((inputs,), tuple(layers), classes)


def vgg16(input_size: int = 224, width_div: int = 1, classes: int = 1000, dense_units: int = 4096) -> ModelDef:
    layers = []
    for width, reps in VGG16_BLOCKS:
        for _ in range(reps):
            layers += [conv2d(max(1, width // width_div), 3, padding="same"), RELU]
        layers.append(maxpool(2))
    units = max(1, dense_units // width_div)
    layers += [dense(units), RELU, dense(units), RELU, dense(classes), SOFTMAX]
    return ModelDef((3, input_size, input_size), tuple(layers), classes)


def mobilenet(input_size: int = 224, width_div: int = 1, classes: int = 1000) -> ModelDef:
    layers = [conv2d(max(1, 32 // width_div), 3, stride=2, padding=1), RELU]
    for width, stride in MOBILENET_BLOCKS:
        layers += [depthwise_conv2d(3, stride=stride, padding=1), RELU,
                   conv2d(max(1, width // width_div), 1), RELU]
    final = input_size // 32
    if final > 1:
        layers.append(maxpool(final))
    layers += [dense(classes), SOFTMAX]
    return ModelDef((3, input_size, input_size), tuple(layers), classes)


def toy_cnn(classes: int = 10) -> ModelDef:
    return ModelDef((3, 16, 16), (
        conv2d(8, 3, padding="same"), RELU, maxpool(2),
        depthwise_conv2d(3, padding=1), RELU,
        conv2d(16, 1), RELU, maxpool(2),
        dense(32), RELU, dense(classes), SOFTMAX), classes)


NETWORKS = {
    "toy-cnn": toy_cnn,
    "detector-cnn": detector_cnn,
    "vgg16": vgg16,
    "mobilenet": mobilenet,
}
