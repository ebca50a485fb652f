"""Small corpora and models shared by the neural tests."""

import torch

from irsem.env import env_lines
from irsem.ir import analyze
from irsem.model import ModelConfig, PretrainModel, build_batch
from irsem.objectives import MocoQueue
from irsem.parser import parse_file, parse_function
from irsem.text import instruction_texts, sample_from_function, train_bpe

from oracles import FIXTURES

TWO = """define i32 @f(i32 %x) {
  %y = add i32 %x, 1
  ret i32 %y
}
"""


def fixture_functions():
    return [fn for p in sorted(FIXTURES.glob("*.ll")) for fn in parse_file(p).functions]


def fixture_vocab(size=200):
    lines = []
    for fn in fixture_functions():
        cfg, _, loops = analyze(fn)
        lines += instruction_texts(fn) + env_lines(fn, cfg, loops)
    return train_bpe(lines, size)


def two_instruction_sample(vocab, **kw):
    return sample_from_function(parse_function(TWO), vocab, **kw)


def tiny_config(vocab_size, **kw):
    base = dict(d=8, heads=2, ff=16, pre_layers=1, inst_layers=2, post_layers=1, K=2,
                B_ir=8, B_env=8, max_instructions=4, moco_dim=4, dropout=0.0)
    base.update(kw)
    return ModelConfig(vocab_size, **base)


def unit_rows(n, dim, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, dim, generator=g, dtype=dtype)
    return x / x.norm(dim=1, keepdim=True)


def filled_queue(cfg, n, seed=0):
    q = MocoQueue(16, cfg.moco_dim, cfg.torch_dtype)
    q.enqueue(unit_rows(n, cfg.moco_dim, seed))
    return q


GRAD_FLOOR = 1e-5  # far above the ~1e-9 central-difference round-off at eps=1e-6


def gradcheck_setup(mu=1000.0):
    """d=8 model over a hand-built two-instruction sample with fixed keys and negatives.

    The init scale is raised so every tensor, including the positional
    tables, carries a gradient well above finite-difference noise.
    """
    from irsem.objectives import PretrainLossWeights, key_features, query_losses
    from irsem.text import MaskPlan, TrainingSample

    s = TrainingSample("f", "O0", [[5, 6, 7], [8, 9]], [[10, 6], [11, 12, 13]],
                       [(0, 1, 1), (1, -1, -1)], K=2, B_ir=8, B_env=8)
    cfg = tiny_config(16, ff=8, init_std=0.3)
    model = PretrainModel(cfg, seed=1)
    query = build_batch([s], cfg, [MaskPlan(ir={0: "mask"}, env={1: "mask"})])
    keys = key_features(model, build_batch([s], cfg))
    negatives = filled_queue(cfg, 3).entries()
    weights = PretrainLossWeights(1.0, mu)

    def loss():
        return query_losses(model, query, keys, negatives, weights, 0.02).total

    return model, loss
