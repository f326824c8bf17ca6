"""Central finite-difference checks for every loss path in the package."""
from __future__ import annotations

import numpy as np

from .agent import PersonaAgent
from .nncore import Dense, Embedding, ParamSet, softmax_nll
from .query import (ASK_CONTINUE, ASK_IGNORE, ASK_QUERY, ErrPredNet, QueryNet,
                    StepRecord, query_imitation_loss)
from .teachers import TeacherResponse

FD_STEP = 1e-5
REL_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float((diff / scale).max())


def fd_gradients(params: ParamSet, loss_fn, h: float = FD_STEP):
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter."""
    grads = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat_value = p.value.reshape(-1)
        flat_grad = g.reshape(-1)
        for i in range(flat_value.size):
            orig = flat_value[i]
            flat_value[i] = orig + h
            hi = loss_fn()
            flat_value[i] = orig - h
            lo = loss_fn()
            flat_value[i] = orig
            flat_grad[i] = (hi - lo) / (2.0 * h)
        grads[p.name] = g
    return grads


def check_params(params: ParamSet, loss_and_backward, loss_fn) -> float:
    """Max relative error between accumulated and finite-difference gradients."""
    params.zero_grad()
    loss_and_backward()
    analytic = {p.name: p.grad.copy() for p in params}
    params.zero_grad()
    numeric = fd_gradients(params, loss_fn)
    return max(relative_error(analytic[name], numeric[name]) for name in analytic)


def check_dense(rng: np.random.Generator) -> float:
    """Two stacked Dense layers (tanh then identity) under an NLL head."""
    params = ParamSet()
    h1 = Dense(params, "h1", 6, 5, "tanh", rng)
    h2 = Dense(params, "h2", 5, 3, "identity", rng)
    x = rng.normal(size=6)
    target = int(rng.integers(3))

    def forward():
        a, ca = h1.forward(x)
        logits, cb = h2.forward(a)
        return a, ca, logits, cb

    def loss_fn():
        _, _, logits, _ = forward()
        return softmax_nll(logits, target)[1]

    def backward():
        _, ca, logits, cb = forward()
        _, _, dlogits = softmax_nll(logits, target)
        h1.backward(ca, h2.backward(cb, dlogits))

    return check_params(params, backward, loss_fn)


def check_embedding(rng: np.random.Generator) -> float:
    """Embedding row feeding a Dense layer; only that row should move."""
    params = ParamSet()
    table = Embedding(params, "emb", 4, 5, rng)
    out = Dense(params, "out", 5, 3, "identity", rng)
    index = int(rng.integers(4))
    target = int(rng.integers(3))

    def loss_fn():
        logits, _ = out.forward(table.forward(index))
        return softmax_nll(logits, target)[1]

    def backward():
        logits, cache = out.forward(table.forward(index))
        _, _, dlogits = softmax_nll(logits, target)
        table.backward(index, out.backward(cache, dlogits))

    err = check_params(params, backward, loss_fn)
    params.zero_grad()
    backward()
    grad = params["emb"].grad
    other_rows = [r for r in range(4) if r != index]
    if np.abs(grad[other_rows]).max() != 0.0:
        return np.inf
    return err


def check_softmax_nll(rng: np.random.Generator) -> float:
    """NLL gradient w.r.t. the logits themselves."""
    logits = rng.normal(scale=3.0, size=5)
    target = int(rng.integers(5))
    _, _, analytic = softmax_nll(logits, target)
    numeric = np.zeros_like(logits)
    for i in range(logits.size):
        orig = logits[i]
        logits[i] = orig + FD_STEP
        hi = softmax_nll(logits, target)[1]
        logits[i] = orig - FD_STEP
        lo = softmax_nll(logits, target)[1]
        logits[i] = orig
        numeric[i] = (hi - lo) / (2.0 * FD_STEP)
    return relative_error(analytic, numeric)


def _small_query_net(rng: np.random.Generator) -> tuple[QueryNet, list[StepRecord]]:
    net = QueryNet(state_dim=4, n_actions=2, horizon=3, rng=rng, hidden=6)
    steps = []
    for t in range(3):
        probs = rng.random(2)
        probs /= probs.sum()
        steps.append(StepRecord(features=rng.normal(size=4),
                                exe_action=int(rng.integers(2)),
                                ask_action=int(rng.integers(2)),
                                mean_policy=probs, remaining=3 - t))
    return net, steps


def check_query_loss(rng: np.random.Generator) -> float:
    """Masked ask-imitation loss over a short trajectory."""
    net, steps = _small_query_net(rng)
    labels = [int(rng.choice([ASK_CONTINUE, ASK_QUERY, ASK_IGNORE]))
              for _ in steps]
    if all(lab == ASK_IGNORE for lab in labels):
        labels[0] = ASK_QUERY

    def backward():
        query_imitation_loss(net, steps, labels)
        net._pending = 0

    def loss_fn():
        total = 0.0
        for step, label in zip(steps, labels):
            if label == ASK_IGNORE:
                continue
            probs = net.forward(step.features, step.mean_policy, step.remaining)
            total += -np.log(probs[label])
        return total

    return check_params(net.params, backward, loss_fn)


def check_errpred(rng: np.random.Generator) -> float:
    """Squared-error margin regression."""
    net = ErrPredNet(state_dim=4, n_actions=2, rng=rng, hidden=6)
    # shift the head off its constant-1.0 start so the check is non-trivial
    net.out.w.value[...] = rng.normal(scale=0.1, size=net.out.w.value.shape)
    features = rng.normal(size=4)
    probs = rng.random(2)
    probs /= probs.sum()
    target = float(rng.random())

    def backward():
        net.accumulate_sq_loss(features, probs, target)
        net._pending = 0

    def loss_fn():
        return (net.predict(features, probs) - target) ** 2

    return check_params(net.params, backward, loss_fn)


def check_agent_losses(rng: np.random.Generator) -> float:
    """Persona-policy and identity NLLs through the full agent."""
    agent = PersonaAgent(state_dim=4, n_actions=2, n_teachers=2, rng=rng,
                         hidden=6, persona_dim=3)
    features = rng.normal(size=4)
    response = TeacherResponse(exe_action=int(rng.integers(2)),
                               identity=int(rng.integers(2)), dist=1.0)

    def backward():
        agent.exe_losses(features, response)
        agent._pending = 0

    def loss_fn():
        pol = -np.log(agent.policy_probs(features, response.identity)
                      [response.exe_action])
        rho = agent.identity_probs(features)
        return float(pol - np.log(rho[response.identity]))

    def check(params):
        params.zero_grad()
        backward()
        analytic = {p.name: p.grad.copy() for p in params}
        params.zero_grad()
        numeric = fd_gradients(params, loss_fn)
        return max(relative_error(analytic[n], numeric[n]) for n in analytic)

    return max(check(agent.exe_params), check(agent.id_params))


SUITES = (
    ("dense", check_dense),
    ("embedding", check_embedding),
    ("softmax_nll", check_softmax_nll),
    ("query_loss", check_query_loss),
    ("errpred", check_errpred),
    ("agent_losses", check_agent_losses),
)


def run_all(seed: int = 0, cases: int = 100):
    """Return [(suite, worst relative error, passed)] over randomized cases."""
    results = []
    for name, fn in SUITES:
        rng = np.random.default_rng(seed)
        worst = max(fn(rng) for _ in range(cases))
        results.append((name, worst, worst < REL_TOL))
    return results
