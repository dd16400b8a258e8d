import logging
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Callable, Deque, Iterator, List, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class BatchPrefetcher:
    """
    Build batches on a worker pool ahead of the consumer.

    At most `max_ahead` results are pending at once and results are yielded in
    submission order, whatever order the workers finish in.
    """

    def __init__(self, *, max_ahead: int = 2, max_workers: int = 1):
        self._max_ahead = max(0, int(max_ahead))
        self._max_workers = max(1, int(max_workers))

    def map(self, build: Callable[[T], R], items: Sequence[T]) -> Iterator[R]:
        if self._max_ahead == 0:
            for item in items:
                yield build(item)
            return

        with ThreadPoolExecutor(max_workers=self._max_workers) as executor:
            pending: Deque[Future] = deque()
            queue: List[T] = list(items)
            next_index = 0
            try:
                while next_index < len(queue) or pending:
                    while next_index < len(queue) and len(pending) < self._max_ahead:
                        pending.append(executor.submit(build, queue[next_index]))
                        next_index += 1
                    yield pending.popleft().result()
            finally:
                for future in pending:
                    future.cancel()
