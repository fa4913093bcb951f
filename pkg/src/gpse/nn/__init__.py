from .autodiff import Index, Parameter, Tensor
from .gradcheck import GradCheckResult, grad_check, grad_check_detail
from .layers import (CONV_TYPES, MLP, GatedGCNLayer, GCNLayer, GINLayer, GraphBatch, LayerNorm,
                     Linear, Module, VirtualNode, make_batch)
from .loss import l1_cosine_loss, l1_cosine_terms
from .optim import Adam, clip_grad_norm, warmup_cosine
