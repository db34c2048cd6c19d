import logging
import queue
import threading
import time
from typing import Any, Callable, List, Optional, Tuple, Type


def make_jobs(total: int, batch_size: int) -> "queue.Queue[Tuple[int, int]]":
    """Fills a job queue with [start, end) index ranges of at most batch_size items covering range(total)."""
    jobs: "queue.Queue[Tuple[int, int]]" = queue.Queue()
    i = 0
    while i < total:
        jobs.put((i, min(i + batch_size, total)))
        i += batch_size
    return jobs


def run_threaded(
    items: List[Any],
    work: Callable[[List[Any]], List[Any]],
    num_threads: int = 1,
    batch_size: int = 10000,
) -> List[Any]:
    """
    Split up items into batches, process the batches on a pool of threads and return the results in item order.

    Args:
        items: Everything to process.
        work: Function turning one batch of items into one batch of results.
        num_threads: The number of threads to be used.
        batch_size: The biggest batch handed to one call of work.

    Returns:
        The concatenated results, in the order of the batches they came from.
    """
    if num_threads <= 1 or len(items) <= batch_size:
        return work(items)

    jobs = make_jobs(len(items), batch_size)
    results = {}
    errors: List[BaseException] = []
    lock = threading.Lock()

    def worker():
        while True:
            try:
                start, end = jobs.get_nowait()
            except queue.Empty:
                return
            try:
                batch_result = work(items[start:end])
                with lock:
                    results[start] = batch_result
            except BaseException as exc:  # surfaced to the caller after join
                with lock:
                    errors.append(exc)
            finally:
                jobs.task_done()

    threads = [threading.Thread(target=worker, name=f"relay-worker-{t}") for t in range(num_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if errors:
        raise errors[0]

    logging.debug(f"Processed {len(items)} items in {len(results)} batches on {num_threads} threads")
    return [result for start in sorted(results) for result in results[start]]


def retry(
    function: Callable[..., Any],
    *args,
    tries: int = 3,
    delay: float = 0.1,
    exceptions: Tuple[Type[BaseException], ...] = (OSError,),
    **kwargs,
) -> Optional[Any]:
    """
    Attempt to call the function, if it fails with one of the given exceptions retry it with a growing delay.

    Args:
        function: The function to call.
        tries: Attempts before the last exception is raised.
        delay: Seconds to wait before the second attempt, doubled for every further attempt.
        exceptions: Exceptions that trigger another attempt.

    Returns:
        The return value of the first successful call.
    """
    for i in range(tries):
        logging.debug("Current try: %d" % i)
        try:
            return function(*args, **kwargs)
        except exceptions as e:
            if i == tries - 1:
                raise
            logging.warning(f"Retrying due to {e}")
            time.sleep(delay * (2**i))
    return None
