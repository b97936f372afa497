import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Sequence, TypeVar, Union

import numpy as np

"""
Seeding, worker pools and the evaluation of analytic inputs.
"""

T = TypeVar("T")
R = TypeVar("R")

# Names visible to analytic expressions in configuration files.
EXPRESSION_NAMESPACE: Dict[str, object] = {
    name: getattr(np, name)
    for name in (
        "sin cos tan exp log sqrt abs sinh cosh tanh arctan minimum maximum where heaviside"
    ).split()
}
EXPRESSION_NAMESPACE["pi"] = np.pi


def spawn_generators(seed: Union[int, Sequence[int]], n: int) -> List[np.random.Generator]:
    """
    Independent random generators, one per sample index, split from a single root seed.

    Parameters:
        seed: Root seed (64-bit), or a list of integers such as [seed, N] for one stream
            family per mesh.
        n (int): Number of streams.

    Returns:
        List[np.random.Generator]: The k-th generator only depends on (seed, k).

    Raises:
        ValueError: If n is negative.
    """
    if n < 0:
        raise ValueError(f"The number of streams must be >= 0, got {n}.")
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def map_samples(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> List[R]:
    """
    Apply fn to every item, in a thread pool when threads > 1. Results keep the item order.

    Raises:
        ValueError: If threads < 1.
    """
    if threads < 1:
        raise ValueError(f"threads must be at least 1, got {threads}.")
    items = list(items)
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logging.info(f"Running {len(items)} samples on {threads} threads.")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def compile_expression(source: str, variables: Iterable[str] = ("x1", "x2")) -> Callable:
    """
    Compile a numpy expression such as "1 + 0.5*sin(pi*x1)*sin(pi*x2)" into a vectorized
    function of the given variables. Only numpy functions and pi are visible.

    Raises:
        ValueError: If the expression does not compile or uses unknown names.
    """
    variables = tuple(variables)
    try:
        code = compile(source, "<expression>", "eval")
    except SyntaxError as e:
        raise ValueError(f"Invalid expression '{source}': {e.msg}") from e
    unknown = set(code.co_names) - set(EXPRESSION_NAMESPACE) - set(variables)
    if unknown:
        raise ValueError(f"Unknown names {sorted(unknown)} in expression '{source}'.")

    def evaluate(*args):
        scope = dict(zip(variables, args))
        return eval(code, {"__builtins__": {}, **EXPRESSION_NAMESPACE}, scope)

    return evaluate
