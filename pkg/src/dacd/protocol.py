"""The cross-domain evaluation protocol: every variant plus CVA on one benchmark.

* ``dscnet_v1`` - trained on the source sample, applied to the target as is;
* ``dscnet_v3`` - ``dscnet_v1`` with its classifier fine-tuned on the small
  labeled target set;
* ``dscnet_v2`` - trained from scratch on the small labeled target set only;
* ``dsdanet`` - trained with the MK-MMD penalty on unlabeled target batches,
  then fine-tuned like ``dscnet_v3``.
"""
from __future__ import annotations

import logging
import time

from .config import ExperimentConfig
from .data import sample_finetune_set, sample_training_set, synth_generate
from .evaluation import cva_change_map, metrics_report
from .network import Network, finetune_classifier, infer_change_map, train

log = logging.getLogger(__name__)

METHODS = ("cva", "dscnet_v1", "dscnet_v3", "dscnet_v2", "dsdanet")


def v2_epochs(epochs, n_source, n_labeled, batch_size):
    """Epochs on the labeled target set giving as many SGD steps as source training.

    Matching the number of updates, rather than the epoch count, keeps the
    target-only baseline from being under-trained on its 200 samples.
    """
    steps = epochs * (n_source // batch_size)
    per_epoch = max(1, n_labeled // batch_size)
    return max(1, round(steps / per_epoch))


def prepare(cfg: ExperimentConfig, source=None, target=None):
    if source is None or target is None:
        source, target = synth_generate(cfg.synth, cfg.seed)
    train_set = sample_training_set(source, cfg.sampling.fraction, cfg.sampling.max_ratio, cfg.seed)
    labeled = sample_finetune_set(target, cfg.sampling.finetune_count, cfg.seed)
    return source, target, train_set, labeled


def train_variant(cfg, mode, train_set, target, labeled):
    """Train one variant; ``dscnet_v3`` and ``dsdanet`` come back fine-tuned."""
    net = Network(cfg.network, cfg.seed)
    tcfg = cfg.train_config(mode)
    if mode == "dscnet_v2":
        tcfg.epochs = v2_epochs(tcfg.epochs, train_set.n, labeled.n, tcfg.batch_size)
        # the labeled set is balanced, so it gets the fine-tuning class weight
        tcfg.unchanged_weight = cfg.finetune.unchanged_weight
        history = train(net, labeled, None, tcfg)
    else:
        history = train(net, train_set, target, tcfg)
    ft_losses = None
    if mode in ("dscnet_v3", "dsdanet"):
        ft_losses = finetune_classifier(net, labeled, cfg.finetune.epochs, cfg.finetune.lr, cfg.finetune.unchanged_weight)
    return net, history, ft_losses


def run_protocol(cfg: ExperimentConfig, source=None, target=None):
    """Run every method on the target scene; returns reports, networks and logs.

    ``dscnet_v1`` and ``dscnet_v3`` share the source-only training run.
    """
    source, target, train_set, labeled = prepare(cfg, source, target)
    result = {"reports": {}, "networks": {}, "histories": {}, "finetune_losses": {}, "seconds": {}}

    def record(name, net, start):
        change = infer_change_map(net, target.t1, target.t2)
        result["reports"][name] = metrics_report(name, change, target.labels)
        result["networks"][name] = net
        result["seconds"][name] = time.perf_counter() - start
        log.info("%s: %s", name, result["reports"][name])

    result["reports"]["cva"] = metrics_report("cva", cva_change_map(target.t1, target.t2), target.labels)

    start = time.perf_counter()
    net, history, _ = train_variant(cfg, "dscnet_v1", train_set, target, labeled)
    result["histories"]["dscnet_v1"] = history
    record("dscnet_v1", net, start)

    start = time.perf_counter()
    tuned = net.copy()
    result["finetune_losses"]["dscnet_v3"] = finetune_classifier(
        tuned, labeled, cfg.finetune.epochs, cfg.finetune.lr, cfg.finetune.unchanged_weight
    )
    result["histories"]["dscnet_v3"] = history
    record("dscnet_v3", tuned, start)

    for mode in ("dscnet_v2", "dsdanet"):
        start = time.perf_counter()
        net, history, ft = train_variant(cfg, mode, train_set, target, labeled)
        result["histories"][mode] = history
        if ft is not None:
            result["finetune_losses"][mode] = ft
        record(mode, net, start)
    result["data"] = {"source": source, "target": target, "train_set": train_set, "labeled": labeled}
    return result
