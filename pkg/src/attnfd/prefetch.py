import logging
import multiprocessing
import queue
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .dataset import AugmentPolicy, Sample, augment

logger = logging.getLogger(__name__)

RESULT_TIMEOUT = 60.0


@dataclass
class Batch:
    index: int
    images: np.ndarray  # (n, 3, h, w)
    labels: np.ndarray  # (n, h, w)


def augment_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream, independent of batching and workers."""
    return np.random.default_rng([seed, epoch, index])


def epoch_batches(count: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded shuffle (seed + epoch) split into consecutive batches; the last may be short."""
    order = np.random.default_rng(seed + epoch).permutation(count)
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def make_batch(
    samples: Sequence[Sample],
    batch_index: int,
    indices: Sequence[int],
    seed: int,
    epoch: int,
    policy: Optional[AugmentPolicy],
) -> Batch:
    picked = []
    for i in indices:
        s = samples[int(i)]
        picked.append(augment(s, augment_rng(seed, epoch, int(i)), policy) if policy else s)
    return Batch(
        index=batch_index,
        images=np.stack([s.image for s in picked]),
        labels=np.stack([s.label for s in picked]),
    )


def worker_main(
    samples: Sequence[Sample],
    policy: Optional[AugmentPolicy],
    task_queue: multiprocessing.Queue,
    result_queue: multiprocessing.Queue,
    log_level: int,
) -> None:
    """
    Main loop for an augmentation worker process.
    """
    logging.basicConfig(
        level=log_level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    log = logging.getLogger("attnfd.prefetch.worker")
    log.debug("Prefetch worker started")

    while True:
        try:
            task = task_queue.get(timeout=1.0)
        except queue.Empty:
            continue
        except KeyboardInterrupt:
            break

        if task is None:
            log.debug("Worker received stop signal")
            break

        batch_index, indices, seed, epoch = task
        try:
            result_queue.put(make_batch(samples, batch_index, indices, seed, epoch, policy))
        except Exception as e:
            log.error(f"Failed to build batch {batch_index}: {e}")
            result_queue.put((batch_index, f"{type(e).__name__}: {e}"))


class Prefetcher:
    """Builds augmented batches, optionally in worker processes.

    Batches are always yielded in the seeded order, so results do not
    depend on the number of workers.
    """

    def __init__(
        self,
        samples: Sequence[Sample],
        policy: Optional[AugmentPolicy],
        workers: int = 0,
        log_level: Optional[int] = None,
    ) -> None:
        if workers < 0:
            raise ValueError(f"workers must be >= 0, got {workers}")
        self.samples = samples
        self.policy = policy
        self.workers = workers
        self._processes: List[multiprocessing.Process] = []
        self._tasks: Optional[multiprocessing.Queue] = None
        self._results: Optional[multiprocessing.Queue] = None
        if workers:
            self._start(logging.getLogger().level if log_level is None else log_level)

    def _start(self, log_level: int) -> None:
        self._tasks = multiprocessing.Queue()
        self._results = multiprocessing.Queue()
        for _ in range(self.workers):
            p = multiprocessing.Process(
                target=worker_main,
                args=(self.samples, self.policy, self._tasks, self._results, log_level),
                daemon=True,
            )
            p.start()
            self._processes.append(p)
        logger.info(f"Started {self.workers} prefetch workers")

    def batches(self, seed: int, epoch: int, batch_size: int) -> Iterator[Batch]:
        plan = epoch_batches(len(self.samples), batch_size, seed, epoch)
        if not self.workers:
            for b, indices in enumerate(plan):
                yield make_batch(self.samples, b, indices, seed, epoch, self.policy)
            return

        for b, indices in enumerate(plan):
            self._tasks.put((b, indices, seed, epoch))
        ready: Dict[int, Batch] = {}
        for b in range(len(plan)):
            while b not in ready:
                try:
                    item = self._results.get(timeout=RESULT_TIMEOUT)
                except queue.Empty:
                    raise RuntimeError(f"Timed out waiting for batch {b} from prefetch workers")
                if isinstance(item, tuple):
                    raise RuntimeError(f"Prefetch worker failed on batch {item[0]}: {item[1]}")
                ready[item.index] = item
            yield ready.pop(b)

    def close(self) -> None:
        if not self._processes:
            return
        for _ in self._processes:
            self._tasks.put(None)
        for p in self._processes:
            p.join(timeout=5.0)
            if p.is_alive():
                logger.warning(f"Prefetch worker {p.pid} did not exit, terminating")
                p.terminate()
        self._processes = []
        logger.info("Prefetch workers stopped")

    def __enter__(self) -> "Prefetcher":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
