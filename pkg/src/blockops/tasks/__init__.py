from .batches import TaskBatch, one_hot, indicator_block
from . import addmul, doubleadd, algo, bpmnist, mnist_io
