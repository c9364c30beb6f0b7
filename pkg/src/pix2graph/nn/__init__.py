from pix2graph.nn.adam import AdamState, adam_step
from pix2graph.nn.gin import GinParams, GraphBatch, gin_forward
from pix2graph.nn.tensor import Tensor, gradients

__all__ = ["AdamState", "adam_step", "GinParams", "GraphBatch", "gin_forward", "Tensor", "gradients"]
