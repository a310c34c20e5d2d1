#! /usr/bin/env python
"""
parallel.py
Processing of embarrassingly parallel tasks using concurrent futures, with
progress bars. Experiment jobs use processes; agent training inside one run
uses threads so the agents stay in the caller's memory.
"""
from tqdm import tqdm
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor, \
    as_completed


def parallel_process(array, function, n_jobs=16, use_kwargs=False,
                     backend='process', progress=True):
    """
        A parallel version of the map function with a progress bar.

        Args:
            array (array-like): An array to iterate over.
            function (function): A python function to apply to the elements of array
            n_jobs (int, default=16): The number of workers to use. With
                n_jobs <= 1 the map runs serially in the calling thread.
            use_kwargs (boolean, default=False): Whether to consider the elements of array as dictionaries of
                keyword arguments to function
            backend (str): 'process' or 'thread'
            progress (bool): display a tqdm progress bar
        Returns:
            [function(array[0]), function(array[1]), ...] in input order.
            Exceptions raised by a task are re-raised here.
    """
    if backend not in ('process', 'thread'):
        raise ValueError("backend must be either 'process' or 'thread'")

    array = list(array)
    if n_jobs <= 1 or len(array) <= 1:
        iterator = tqdm(array, disable=not progress, leave=True)
        if use_kwargs:
            return [function(**a) for a in iterator]
        return [function(a) for a in iterator]

    executor = ProcessPoolExecutor if backend == 'process' else ThreadPoolExecutor
    with executor(max_workers=n_jobs) as pool:
        if use_kwargs:
            futures = [pool.submit(function, **a) for a in array]
        else:
            futures = [pool.submit(function, a) for a in array]
        kwargs = {
            'total': len(futures),
            'unit': 'it',
            'unit_scale': True,
            'leave': True,
            'disable': not progress
        }
        for _ in tqdm(as_completed(futures), **kwargs):
            pass

    return [future.result() for future in futures]
