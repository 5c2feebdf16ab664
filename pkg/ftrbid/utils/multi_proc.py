"""
Worker pool whose processes log through the main process and share its configuration.
"""

import logging
import multiprocessing as mp
import multiprocessing.pool

import ftrbid
from ftrbid.utils import logutil

logger = logging.getLogger(__name__)


def _init_worker(config: dict):
    # Spawned workers start with an empty configuration.
    ftrbid.config.update(config)


class TProcess(mp.Process):
    """
    Process that forwards its log records to `logutil.mp_queue` before running its target.
    """

    def __init__(self, group=None, target=None, name=None, args=(), kwargs=None):
        # BaseProcess only accepts group=None.
        super().__init__(target=target, name=name, args=args, kwargs=kwargs or {})
        self.log_queue = logutil.mp_queue

    def run(self):
        logutil.setup_logging(queue=self.log_queue)
        logger.debug(f"Worker {self.name} started.")
        super().run()


class TPool(mp.pool.Pool):
    """
    :class:`multiprocessing.pool.Pool` of :class:`TProcess` workers holding a copy of `ftrbid.config`.
    """

    @staticmethod
    def Process(ctx, *args, **kwds):
        return TProcess(*args, **kwds)

    def __init__(self, processes=None, maxtasksperchild=None):
        logutil.start_listener()
        super().__init__(
            processes=processes,
            maxtasksperchild=maxtasksperchild,
            initializer=_init_worker,
            initargs=(dict(ftrbid.config),),
        )
