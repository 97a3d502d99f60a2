import numpy as np
import pytest

from ssplab.policy import PolicyArchitecture, Vocabulary, init_params

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def central_fd(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / denom)


def small_vocab(size=4):
    return Vocabulary.with_eos([f"t{i}" for i in range(size - 1)])


def small_arches(vocab_size=4):
    v = small_vocab(vocab_size)
    return {"tabular": PolicyArchitecture.tabular(v, 2), "linear": PolicyArchitecture.linear(v, 1)}


def random_pairs(rng, vocab, n, prompt_len=3, max_resp=4):
    pairs = []
    for _ in range(n):
        prompt = rng.integers(0, vocab.size, size=prompt_len)
        body = rng.integers(0, vocab.size - 1, size=rng.integers(0, max_resp))
        body = np.where(body >= vocab.eos_id, body + 1, body)
        pairs.append((prompt, np.append(body, vocab.eos_id)))
    return pairs


@pytest.fixture
def arches():
    return small_arches()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_params(arch, seed, scale=1.0):
    return init_params(arch, seed, scale)


# --- tiny RL instances --------------------------------------------------------

def tiny_universe_config():
    from ssplab.tasks import UniverseConfig

    return UniverseConfig(
        base=3,
        width=1,
        subdomains=[{"name": "add", "kind": "add"}, {"name": "mul", "kind": "mul"}],
        sizes={"train": 3, "probe": 3, "holdout": 3},
    )


def tiny_arch(kind):
    from ssplab.policy import PolicyArchitecture

    vocab = tiny_universe_config().vocabulary()
    if kind == "tabular":
        return PolicyArchitecture.tabular(vocab, 2)
    return PolicyArchitecture.linear(vocab, 1)


def hand_group(question, n_correct, G, rng, arch, old_params):
    """A rollout group with exactly ``n_correct`` verified responses, traced under ``old_params``."""
    from ssplab.grpo import make_group
    from ssplab.policy import logprob

    eos = arch.vocab.eos_id
    responses = []
    for i in range(G):
        if i < n_correct:
            responses.append(np.array(question.answer))
        else:
            while True:
                body = rng.integers(0, eos, size=rng.integers(0, 3))
                r = np.append(body, eos)
                if tuple(r) != question.answer:
                    break
            responses.append(r)
    order = rng.permutation(G)
    responses = [responses[j] for j in order]
    traces = [logprob(old_params, arch, question.prompt, r) for r in responses]
    return make_group(question, responses, traces)


def rl_instance(seed, kind, G=4, n_groups=3, drift=0.3):
    """Random (params, old snapshot, groups) with mixed rewards and ratios away from one."""
    from ssplab.policy import PolicySnapshot, init_params
    from ssplab.tasks import generate_universe

    rng = np.random.default_rng(seed)
    arch = tiny_arch(kind)
    old = init_params(arch, seed, 1.0)
    problems = [p for s in generate_universe(tiny_universe_config(), seed) for p in s.problems]
    groups = []
    for k in range(n_groups):
        q = problems[rng.integers(len(problems))]
        n_correct = 1 + (k % (G - 1)) if k < n_groups - 1 else int(rng.integers(0, G + 1))
        groups.append(hand_group(q, n_correct, G, rng, arch, old))
    params = old + drift * rng.standard_normal(old.size)
    return arch, params, PolicySnapshot(arch, old), groups


def fd_check_sft(seed, kind):
    from ssplab.policy import init_params, sft_loss_and_grad

    arch = tiny_arch(kind)
    rng = np.random.default_rng(seed)
    params = init_params(arch, seed, 1.0)
    batch = random_pairs(rng, arch.vocab, 4, prompt_len=3, max_resp=3)
    _, grad = sft_loss_and_grad(params, arch, batch)
    fd = central_fd(lambda p: sft_loss_and_grad(p, arch, batch)[0], params)
    return rel_err(grad, fd)


def fd_check_grpo(seed, kind, kl=False):
    from ssplab.grpo import ClipConfig, grpo_objective_and_grad
    from ssplab.policy import PolicySnapshot, init_params

    arch, params, old, groups = rl_instance(seed, kind)
    clip = ClipConfig(0.2)
    if kl:
        clip = ClipConfig(0.2, 0.1, PolicySnapshot(arch, init_params(arch, seed + 1, 1.0)))
    _, grad = grpo_objective_and_grad(params, old, groups, clip)
    fd = central_fd(lambda p: grpo_objective_and_grad(p, old, groups, clip)[0], params)
    return rel_err(grad, fd)


def fd_check_mgpo(seed, kind, lam=1.0):
    from ssplab.grpo import ClipConfig
    from ssplab.mgpo import MgpoConfig, mgpo_objective_and_grad

    arch, params, old, groups = rl_instance(seed, kind)
    clip, cfg = ClipConfig(0.2), MgpoConfig(lam)
    _, grad = mgpo_objective_and_grad(params, old, groups, clip, cfg)
    fd = central_fd(lambda p: mgpo_objective_and_grad(p, old, groups, clip, cfg)[0], params)
    return rel_err(grad, fd)


# --- decontamination fixture ---------------------------------------------------

def _word_pool(rng, size, prefix):
    letters = np.array(list("abcdefghijklmnopqrstuvwxyz"))
    return np.array([prefix + "".join(row) for row in rng.choice(letters, (size, 6))])


def decontam_fixture(seed=0, n_clean=1000, n_plants=50, n_near=300):
    """Eval records, then a shuffled training corpus of clean records and planted overlaps.

    Eval and train draw from disjoint word pools. ``n_near`` clean records carry
    a verbatim 9-token eval run bordered by train-only words; each plant carries
    a 10 to 14 token eval span, some with case and punctuation changes.
    Returns ``(eval_records, train_records, planted_ids)``.
    """
    rng = np.random.default_rng(seed)
    eval_words = _word_pool(rng, 3000, "e")
    train_words = _word_pool(rng, 3000, "t")
    evals = [" ".join(rng.choice(eval_words, 60)) for _ in range(40)]
    eval_toks = [e.split() for e in evals]

    def filler(k):
        return list(rng.choice(train_words, k))

    def span(length):
        toks = eval_toks[rng.integers(len(eval_toks))]
        start = rng.integers(0, len(toks) - length + 1)
        return toks[start : start + length]

    records = []
    for i in range(n_clean):
        body = filler(int(rng.integers(5, 60)))
        if i < n_near:
            pos = int(rng.integers(0, len(body) + 1))
            body = body[:pos] + span(9) + body[pos:]
            body = filler(1) + body + filler(1)
        records.append(("clean", " ".join(body)))
    for j in range(n_plants):
        s = span(int(rng.integers(10, 15)))
        if j % 3 == 1:
            s = [w.upper() if k % 2 else w.capitalize() for k, w in enumerate(s)]
        if j % 3 == 2:
            s = [w + ("," if k % 2 else "!?") for k, w in enumerate(s)]
        records.append(("plant", " ".join(filler(int(rng.integers(0, 20))) + s + filler(int(rng.integers(0, 20))))))
    order = rng.permutation(len(records))
    train = [(f"r{k}", records[i][1]) for k, i in enumerate(order)]
    planted = {f"r{k}" for k, i in enumerate(order) if records[i][0] == "plant"}
    return evals, train, planted


def throughput_corpus(seed=1, n_records=20000, length=60):
    rng = np.random.default_rng(seed)
    words = _word_pool(rng, 5000, "w")
    return [" ".join(row) for row in rng.choice(words, (n_records, length)).tolist()]
