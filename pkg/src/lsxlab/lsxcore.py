"""The self-explanation training loop.

One run is: fit the learner on the base task, then loop (explain on the
critic set, reflect with the internal critic, revise the learner with the
joint loss), then for the image path lock explanations with a final
fine-tune. Two instantiations share the loop:

* image path: explanations are input-times-gradient maps; the critic is a
  second CNN trained to classify them; revision backpropagates the
  critic's cross-entropy through the (differentiable) maps.
* concept path: explanations are candidate logic rules read off integrated
  gradients; the critic ranks them by positive-vs-negative validity; the
  best rule per class becomes an MSE target on the learner's maps.

Every learner epoch (fit, revise, fine-tune) draws its shuffle from the
same per-epoch-index stream, so a run with both loss scales at zero is
bit-identical to plain fitting with the same epoch budget -- the collapse
check the tests pin down.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import attribution, autodiff as ad, datasets, logic, nets


class LsxError(RuntimeError):
    pass


@dataclass
class LsxConfig:
    instantiation: str = "cnn"        # cnn | nesy
    iterations: int = 3               # explain/reflect/revise budget T
    lam: float = 100.0                # explanation-loss scale
    lam_ft: float = 10.0              # fine-tune lock scale (cnn only)
    delta: float = 0.2                # concept attribution binarization
    critic_reinit: bool = True
    critic_epochs: int = 1
    fit_epochs: int = 12
    revise_epochs: int = 1
    finetune_epochs: int = 1
    batch_size: int = 64
    critic_chunk: int = 128
    lr: float = 1e-3
    critic_lr: float = 1e-3
    optimizer: str = "adam"
    ig_steps: int = 50
    max_objects: int = 4
    max_attrs: int = 3
    rank_agg: str = "mean"
    convergence_tol: float | None = None
    critic_kind: str = "learned"      # learned | random
    cnn_hidden: int = 128
    predictor_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.instantiation not in ("cnn", "nesy"):
            raise LsxError(f"unknown instantiation {self.instantiation!r}")
        if self.iterations < 1:
            raise LsxError("iteration budget must be >= 1")
        if self.lam < 0 or self.lam_ft < 0 or not 0 <= self.delta <= 1:
            raise LsxError("bad loss scales or delta")

    def total_epochs(self) -> int:
        """Planned learner-epoch budget; the vanilla baseline gets the same."""
        n = self.fit_epochs + self.iterations * self.revise_epochs
        if self.instantiation == "cnn":
            n += self.finetune_epochs
        return n


@dataclass
class DataBundle:
    train: datasets.LabeledSet            # learner set
    critic: datasets.LabeledSet           # critic set
    test: datasets.LabeledSet
    val: datasets.LabeledSet | None = None
    space: logic.ConceptSpace | None = None

    def hashes(self) -> dict[str, str]:
        out = {}
        for name in ("train", "critic", "test", "val"):
            ds = getattr(self, name)
            if ds is not None:
                h = hashlib.sha256(ds.inputs.tobytes() + ds.labels.tobytes())
                out[name] = h.hexdigest()[:16]
        return out


@dataclass
class Feedback:
    """Critic output: a differentiable scalar (image path) or the selected
    rule per class (concept path), plus diagnostics."""

    kind: str                                  # scalar-loss | rule-selection
    scalar: ad.Tensor | None = None
    graph: ad.Graph | None = None
    rules: dict[int, logic.Rule] | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.kind == "scalar-loss") == (self.scalar is None):
            raise LsxError("feedback payload does not match kind")
        if (self.kind == "rule-selection") == (self.rules is None):
            raise LsxError("feedback payload does not match kind")


@dataclass
class RunReport:
    mode: str
    events: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    executed_epochs: int = 0
    test_accuracy: float = 0.0
    data_hashes: dict = field(default_factory=dict)


@dataclass
class RunResult:
    learner: nets._Model
    critic: nets._Model | None
    report: RunReport


def _stream(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *key]))


def _epoch_order(seed: int, epoch_index: int, n: int) -> np.ndarray:
    return _stream(seed, 0xE40C, epoch_index).permutation(n)


def make_learner(cfg: LsxConfig, data: DataBundle) -> nets._Model:
    if cfg.instantiation == "cnn":
        n, c, h, w = data.train.inputs.shape
        spec = nets.CnnSpec(in_channels=c, num_classes=data.train.n_classes,
                            height=h, width=w, fc1=cfg.cnn_hidden)
        return nets.CnnClassifier(spec, cfg.seed)
    n, o, a = data.train.inputs.shape
    spec = nets.ConceptPredictorSpec(o, a, data.train.n_classes, hidden=cfg.predictor_hidden)
    return nets.ConceptPredictor(spec, cfg.seed)


def make_critic(cfg: LsxConfig, data: DataBundle) -> nets.CnnClassifier | None:
    if cfg.instantiation != "cnn":
        return None    # the concept critic is the rule scorer, no parameters
    n, c, h, w = data.train.inputs.shape
    spec = nets.CnnSpec(in_channels=c, num_classes=data.train.n_classes,
                        height=h, width=w, fc1=cfg.cnn_hidden)
    critic = nets.CnnClassifier(spec, _critic_seed(cfg, 0))
    if cfg.critic_kind == "random":
        _zero_params(critic)
    return critic


def _critic_seed(cfg: LsxConfig, iteration: int) -> int:
    return int(_stream(cfg.seed, 0xC217, iteration).integers(0, 2**62))


def _zero_params(model: nets._Model):
    for k in model.params:
        model.params[k] = np.zeros_like(model.params[k])


# ---------------------------------------------------------------------------
# learner epochs (fit / revise / fine-tune all run through here)

def _epoch(model, opt, data: datasets.LabeledSet, cfg: LsxConfig, epoch_index: int,
           extra=None) -> float:
    """One pass over the learner set; `extra` adds a loss term per batch."""
    order = _epoch_order(cfg.seed, epoch_index, len(data))
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        xb, yb = data.inputs[idx], data.labels[idx]
        graph = ad.Graph()
        leaves = model.bind(graph)
        x_leaf = graph.leaf(xb)
        logits = model.logits(x_leaf, leaves)
        loss = nets.cross_entropy(logits, yb)
        if extra is not None:
            term = extra(graph, leaves, x_leaf, xb, yb, idx, logits)
            if term is not None:
                loss = ad.add(loss, term)
        total += nets.train_step(model, opt, graph, loss, leaves) * len(idx)
    return total / max(len(order), 1)


def fit(model, opt, data: datasets.LabeledSet, epochs: int, cfg: LsxConfig,
        start_epoch: int = 0) -> list[float]:
    """Base-task training; returns the loss curve."""
    if len(data) == 0:
        raise LsxError("empty learner set")
    return [_epoch(model, opt, data, cfg, start_epoch + e) for e in range(epochs)]


# ---------------------------------------------------------------------------
# explain

def explain(model, critic_set: datasets.LabeledSet, cfg: LsxConfig,
            space: logic.ConceptSpace | None = None, build_graph: bool = True):
    """Learner explanations for the critic set.

    Image path: one AttributionMap over the whole critic set (differentiable
    when build_graph). Concept path: integrated gradients -> binarize ->
    propositionalize, merged per class with duplicates removed.
    """
    if len(critic_set) == 0:
        raise LsxError("empty critic set")
    if cfg.instantiation == "cnn":
        return attribution.input_x_gradient(
            model, critic_set.inputs, critic_set.labels, critic_set.sample_ids,
            build_graph=build_graph, chunk_size=cfg.critic_chunk)
    attrs = attribution.integrated_gradients(
        model, critic_set.inputs, critic_set.labels, critic_set.sample_ids,
        steps=cfg.ig_steps)
    masks = attribution.binarize(attrs.values, cfg.delta).mask
    return logic.build_candidates(masks, critic_set.labels, space,
                                  cfg.max_objects, cfg.max_attrs)


# ---------------------------------------------------------------------------
# reflect

def reflect_cnn(critic: nets.CnnClassifier, expl: attribution.AttributionMap,
                cfg: LsxConfig, iteration: int,
                critic_opt: nets.Optimizer | None = None) -> Feedback:
    """Train the critic one epoch to classify the explanations; the feedback
    scalar is the batch-averaged critic cross-entropy, kept as a graph node
    whose gradient reaches the learner through the explanation maps."""
    if not expl.differentiable or expl.graph is None:
        raise LsxError("reflect needs differentiable explanations")
    graph = expl.graph
    if cfg.critic_kind == "random":
        _zero_params(critic)
    elif cfg.critic_reinit:
        critic.reinit(_critic_seed(cfg, iteration))
    if critic_opt is None:
        critic_opt = nets.Optimizer(kind=cfg.optimizer, lr=cfg.critic_lr)

    ce_nodes, ce_values, hits, count = [], [], 0, 0
    for _ in range(cfg.critic_epochs):
        for chunk, labels in zip(expl.chunks, expl.chunk_labels):
            critic_leaves = critic.bind(graph)
            logits = critic.logits(chunk, critic_leaves)
            ce = nets.cross_entropy(logits, labels)
            ce_nodes.append(ce)
            ce_values.append(ce.item())
            hits += int((np.argmax(logits.data, axis=1) == labels).sum())
            count += len(labels)
            if cfg.critic_kind != "random":
                grad_map = ad.backward(graph, ce, [t.node for t in critic_leaves.values()])
                grads = {k: grad_map[t.node].data for k, t in critic_leaves.items()}
                critic_opt.step(critic.params, grads)

    acc = sum(ce_nodes[1:], start=ce_nodes[0]) if len(ce_nodes) > 1 else ce_nodes[0]
    feedback = ad.scale(acc, 1.0 / len(ce_nodes))
    post_ce = float(np.mean([
        nets.cross_entropy(ad.Tensor(critic.predict_logits(c.data)), y).item()
        for c, y in zip(expl.chunks, expl.chunk_labels)]))
    return Feedback(
        kind="scalar-loss", scalar=feedback, graph=graph,
        diagnostics={
            "critic_ce_mean": float(np.mean(ce_values)),
            "critic_ce_final": post_ce,
            "critic_expl_acc": 100.0 * hits / max(count, 1),
        })


def reflect_nesy(candidates: logic.CandidateSet, critic_set: datasets.LabeledSet,
                 cfg: LsxConfig, space: logic.ConceptSpace) -> Feedback:
    """Rank candidate rules on the critic set and select the best per class."""
    for k, rules in candidates.per_class.items():
        if not rules:
            raise logic.RuleError(f"class {k}: empty candidate list")
    if cfg.critic_kind == "random":
        rng = _stream(cfg.seed, 0xA2D0)
        scores = {
            k: [logic.RuleScore(r, float(rng.uniform()), float(rng.uniform()))
                for r in rules]
            for k, rules in candidates.per_class.items()
        }
    else:
        scores = logic.score_candidates(candidates, critic_set.inputs,
                                        critic_set.labels, space, agg=cfg.rank_agg)
    best = logic.select_best(scores)
    tables = {
        k: [(logic.print_rule(s.rule), s.rho_pos, s.rho_neg, s.rho) for s in lst]
        for k, lst in scores.items()
    }
    return Feedback(kind="rule-selection", rules=best,
                    diagnostics={"rho_tables": tables,
                                 "n_candidates": candidates.n_rules()})


# ---------------------------------------------------------------------------
# revise

def _cnn_revise_extra(critic: nets.CnnClassifier, cfg: LsxConfig):
    """Joint-loss term: lam * critic CE on freshly built explanation maps.

    The critic is evaluated as a frozen snapshot (constant leaves); only
    the learner parameters receive gradient, through the maps."""
    if cfg.lam == 0.0:
        return None

    def extra(graph, leaves, x_leaf, xb, yb, idx, logits):
        root = attribution.class_logit_sum(logits, yb)
        gx = ad.backward(graph, root, [x_leaf.node], build_graph=True)[x_leaf.node]
        e = ad.mul(x_leaf, gx)
        critic_leaves = {k: graph.constant(v) for k, v in critic.params.items()}
        c_logits = critic.logits(e, critic_leaves)
        return ad.scale(nets.cross_entropy(c_logits, yb), cfg.lam)

    return extra


def _nesy_revise_extra(rules: dict[int, logic.Rule], cfg: LsxConfig,
                       space: logic.ConceptSpace, model):
    """Joint-loss term: lam * MSE between the per-sample grounded best rule
    and the learner's max-abs-normalized integrated-gradients map."""
    if cfg.lam == 0.0:
        return None

    def extra(graph, leaves, x_leaf, zb, yb, idx, logits):
        e = attribution.integrated_gradients_node(model, leaves, zb, yb, graph,
                                                  steps=cfg.ig_steps)
        peak = np.max(np.abs(e.data.reshape(len(zb), -1)), axis=1)
        peak[peak == 0.0] = 1.0   # normalizer detached: constant per sample
        e_n = ad.mul(e, ad.Tensor((1.0 / peak)[:, None, None]))
        targets = np.stack([
            logic.ground_rule(rules[int(y)], z, space) for z, y in zip(zb, yb)
        ])
        return ad.scale(ad.mse(e_n, ad.Tensor(targets)), cfg.lam)

    return extra


def revise(model, opt, data: datasets.LabeledSet, feedback: Feedback, cfg: LsxConfig,
           start_epoch: int, critic: nets.CnnClassifier | None = None,
           space: logic.ConceptSpace | None = None) -> list[float]:
    """One (or more) joint-loss epochs over the learner set."""
    if cfg.instantiation == "cnn":
        if feedback.kind != "scalar-loss":
            raise LsxError(f"cnn revise got feedback kind {feedback.kind!r}")
        extra = _cnn_revise_extra(critic, cfg)
    else:
        if feedback.kind != "rule-selection":
            raise LsxError(f"nesy revise got feedback kind {feedback.kind!r}")
        extra = _nesy_revise_extra(feedback.rules, cfg, space, model)
    return [_epoch(model, opt, data, cfg, start_epoch + e, extra)
            for e in range(cfg.revise_epochs)]


def finetune_lock(model, opt, data: datasets.LabeledSet, cfg: LsxConfig,
                  start_epoch: int) -> list[float]:
    """Freeze a snapshot of the learner's explanations on the whole learner
    set and fine-tune on base loss + lam_ft * MSE(current maps, snapshot)."""
    if cfg.lam_ft == 0.0:
        return [_epoch(model, opt, data, cfg, start_epoch + e)
                for e in range(cfg.finetune_epochs)]
    snapshot = attribution.input_x_gradient(model, data.inputs, data.labels,
                                            chunk_size=cfg.critic_chunk).values

    def extra(graph, leaves, x_leaf, xb, yb, idx, logits):
        root = attribution.class_logit_sum(logits, yb)
        gx = ad.backward(graph, root, [x_leaf.node], build_graph=True)[x_leaf.node]
        e = ad.mul(x_leaf, gx)
        return ad.scale(ad.mse(e, ad.Tensor(snapshot[idx])), cfg.lam_ft)

    return [_epoch(model, opt, data, cfg, start_epoch + e, extra)
            for e in range(cfg.finetune_epochs)]


# ---------------------------------------------------------------------------
# full runs

def _val_loss(model, val: datasets.LabeledSet | None) -> float | None:
    if val is None or len(val) == 0:
        return None
    return nets.cross_entropy(ad.Tensor(model.predict_logits(val.inputs)), val.labels).item()


def run_lsx(cfg: LsxConfig, data: DataBundle) -> RunResult:
    """Full loop: fit, then T rounds of explain/reflect/revise, then the
    image path's fine-tune lock. Aborts carry the iteration index."""
    report = RunReport(mode="lsx", data_hashes=data.hashes())
    learner = make_learner(cfg, data)
    opt = nets.Optimizer(kind=cfg.optimizer, lr=cfg.lr)
    critic = make_critic(cfg, data)
    space = data.space

    report.epoch_losses += fit(learner, opt, data.train, cfg.fit_epochs, cfg)
    report.events.append(("fit", cfg.fit_epochs))
    epoch = cfg.fit_epochs
    prev_val = _val_loss(learner, data.val)

    for t in range(cfg.iterations):
        try:
            expl = explain(learner, data.critic, cfg, space, build_graph=True)
            report.events.append(("explain", len(data.critic)))
            if cfg.instantiation == "cnn":
                fb = reflect_cnn(critic, expl, cfg, iteration=t)
            else:
                fb = reflect_nesy(expl, data.critic, cfg, space)
            report.events.append(("reflect", t))
            report.epoch_losses += revise(learner, opt, data.train, fb, cfg, epoch,
                                          critic=critic, space=space)
            report.events.append(("revise", t))
            epoch += cfg.revise_epochs
            stats = dict(fb.diagnostics)
            stats["iteration"] = t
            del expl, fb   # graphs for this iteration are no longer needed
        except (ad.NonFiniteError, nets.DivergenceError, logic.RuleError,
                logic.ClassAbsentError) as err:
            raise LsxError(f"iteration {t}: {err}") from err
        cur_val = _val_loss(learner, data.val)
        stats["val_loss"] = cur_val
        report.iterations.append(stats)
        if (cfg.convergence_tol is not None and prev_val is not None
                and cur_val is not None and abs(prev_val - cur_val) < cfg.convergence_tol):
            report.events.append(("converged", t))
            break
        prev_val = cur_val

    if cfg.instantiation == "cnn":
        report.epoch_losses += finetune_lock(learner, opt, data.train, cfg, epoch)
        report.events.append(("finetune_lock", cfg.finetune_epochs))
        epoch += cfg.finetune_epochs

    report.executed_epochs = epoch
    report.test_accuracy = learner.accuracy(data.test.inputs, data.test.labels)
    return RunResult(learner, critic, report)


def run_vanilla(cfg: LsxConfig, data: DataBundle, epochs: int | None = None) -> RunResult:
    """Fit-only baseline with the same per-epoch shuffles and step budget."""
    report = RunReport(mode="vanilla", data_hashes=data.hashes())
    learner = make_learner(cfg, data)
    opt = nets.Optimizer(kind=cfg.optimizer, lr=cfg.lr)
    total = cfg.total_epochs() if epochs is None else epochs
    report.epoch_losses += fit(learner, opt, data.train, total, cfg)
    report.events.append(("fit", total))
    report.executed_epochs = total
    report.test_accuracy = learner.accuracy(data.test.inputs, data.test.labels)
    return RunResult(learner, None, report)
