"""Builds the tiny ONNX encoders used by the backend tests.

image_encoder.onnx: 1x3x32x32 -> 8x8 average pool -> flatten (48) -> Gemm -> 1x16
text_encoder.onnx:  1x77 token ids (float) -> Gemm -> 1x16

Weights come from a fixed numpy seed, so reruns produce identical files.
"""
import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper

rng = np.random.default_rng(20211004)
DIM = 16


def save(graph, path):
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 11)])
    model.ir_version = 6
    onnx.checker.check_model(model)
    onnx.save(model, path)


w_img = numpy_helper.from_array(rng.standard_normal((DIM, 48)).astype(np.float32), "w")
b_img = numpy_helper.from_array(rng.standard_normal(DIM).astype(np.float32) * 0.01, "b")
image = helper.make_graph(
    [
        helper.make_node("AveragePool", ["pixels"], ["pooled"], kernel_shape=[8, 8], strides=[8, 8]),
        helper.make_node("Flatten", ["pooled"], ["flat"], axis=1),
        helper.make_node("Gemm", ["flat", "w", "b"], ["embedding"], transB=1),
    ],
    "image_encoder",
    [helper.make_tensor_value_info("pixels", TensorProto.FLOAT, [1, 3, 32, 32])],
    [helper.make_tensor_value_info("embedding", TensorProto.FLOAT, [1, DIM])],
    [w_img, b_img],
)
save(image, "image_encoder.onnx")

w_txt = numpy_helper.from_array(rng.standard_normal((DIM, 77)).astype(np.float32) * 0.01, "w")
b_txt = numpy_helper.from_array(rng.standard_normal(DIM).astype(np.float32), "b")
text = helper.make_graph(
    [helper.make_node("Gemm", ["tokens", "w", "b"], ["embedding"], transB=1)],
    "text_encoder",
    [helper.make_tensor_value_info("tokens", TensorProto.FLOAT, [1, 77])],
    [helper.make_tensor_value_info("embedding", TensorProto.FLOAT, [1, DIM])],
    [w_txt, b_txt],
)
save(text, "text_encoder.onnx")
