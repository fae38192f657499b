"""
File: Global classes that provide service to all modules

Copyright (C) Microsoft Corporation
SPDX-License-Identifier: MIT
"""

from datetime import datetime
from typing import NoReturn, Dict, Optional
from traceback import print_stack

from .config import CONF, LatteException, ValidationError, NumericError


# ==================================================================================================
# Errors
# ==================================================================================================
class ShapeError(ValidationError):
    pass


class DomainError(NumericError):
    pass


class InvalidAggregator(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class ExtentError(ValidationError):
    pass


class EmptyLabelSet(ValidationError):
    pass


class DegenerateEmbeddings(ValidationError):
    pass


class InsufficientBins(ValidationError):
    pass


class InsufficientObservations(ValidationError):
    pass


class SingularKrigingSystem(ValidationError):
    pass


class SplitLeakError(ValidationError):
    pass


class FitDiverged(NumericError):

    def __init__(self, msg: str, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


class DivergenceError(NumericError):

    def __init__(self, msg: str, term: str = ""):
        super().__init__(msg)
        self.term = term


class ParseError(ValidationError):

    def __init__(self, path: str, msg: str, line: Optional[int] = None, field: str = ""):
        location = path
        if line is not None:
            location += f", line {line}"
        if field:
            location += f", field '{field}'"
        super().__init__(f"{location}: {msg}")
        self.path = path
        self.line = line
        self.field = field


# ==================================================================================================
# Statistics
# ==================================================================================================
class StatisticsCls:
    _borg_shared_state: Dict = {}

    epochs: int = 0
    optimizer_steps: int = 0
    skipped_batches: int = 0
    variogram_fits: int = 0
    failed_fits: int = 0
    ac_bins: int = 0
    ac_evaluations: int = 0
    early_stops: int = 0

    # Implementation of Borg pattern
    def __init__(self) -> None:
        self.__dict__ = self._borg_shared_state

    def __str__(self):
        bins_per_step = self.ac_bins / self.ac_evaluations if self.ac_evaluations else 0

        s = "================================ Statistics ===================================\n"
        s += f"Epochs: {self.epochs}\n"
        s += f"Optimizer steps: {self.optimizer_steps}\n"
        s += f"Skipped batches (no labels): {self.skipped_batches}\n"
        s += "Autocorrelation: \n"
        s += f"  Variogram fits: {self.variogram_fits}\n"
        s += f"  Failed fits: {self.failed_fits}\n"
        s += f"  Valid bins per step: {bins_per_step:.1f}\n"
        s += f"Early stops: {self.early_stops}\n"
        return s

    def get_brief(self):
        if self.epochs == 0:
            return ""
        s = f"St:{self.optimizer_steps},"
        s += f"Fit:{self.variogram_fits}/{self.failed_fits},"
        s += f"Skp:{self.skipped_batches}"
        return s

    def reset(self):
        for name in ["epochs", "optimizer_steps", "skipped_batches", "variogram_fits",
                     "failed_fits", "ac_bins", "ac_evaluations", "early_stops"]:
            setattr(self, name, 0)


STAT = StatisticsCls()


class Logger:
    """
    A global object responsible for printing stuff.

    Has the following levels of logging:
    - Error: Critical error. Prints a message and exits
    - Warning: Non-critical error. Always printed, but does not cause an exit
    - Info: Useful info. Printed only if enabled in CONF.logging_modes
    - Debug: Detailed info. Printed if both enabled in CONF.logging_modes and if __debug__ is set.
    """

    start_time: datetime

    # info modes
    info: bool = False
    stat: bool = False
    debug: bool = False

    # debugging specific modules
    dbg_timestamp: bool = False
    dbg_training: bool = False
    dbg_variogram: bool = False

    def __init__(self) -> None:
        self.update_logging_modes()

    def update_logging_modes(self):
        for mode in CONF.logging_modes:
            if not mode:
                continue
            if getattr(self, mode, None) is None:
                self.error(f"Unknown value '{mode}' of config variable 'logging_modes'")
            setattr(self, mode, True)
            if "dbg" in mode:  # enable debug mode if any debug mode is enabled
                self.debug = True

        if not __debug__:
            if self.dbg_training or self.dbg_variogram or self.dbg_timestamp:
                self.warning(
                    "", "Current value of `logging_modes` requires debugging mode!\n"
                    "Remove '-O' from python arguments")

    def error(self, msg: str, print_tb: bool = False, exit_code: int = 1) -> NoReturn:
        if print_tb:
            print("Encountered an unrecoverable error\nTraceback:")
            print_stack()
            print("\n")

        print(f"ERROR: {msg}")
        exit(exit_code)

    def warning(self, src, msg) -> None:
        print(f"WARNING: [{src}] {msg}")

    def inform(self, src, msg, end="\n") -> None:
        if self.info:
            print(f"INFO: [{src}] {msg}", end=end, flush=True)

    def dbg(self, src, msg) -> None:
        if self.debug:
            print(f"DBG: [{src}] {msg}")

    # ==============================================================================================
    # Training
    def training_start(self, max_epochs: int, start_time: datetime):
        self.start_time = start_time
        self.inform("training", start_time.strftime('Starting at %H:%M:%S') +
                    f", at most {max_epochs} epochs")

    def pretrain_epoch(self, epoch: int, loss: float):
        if not __debug__:
            return
        if self.dbg_training and epoch % 10 == 0:
            self.dbg("pretrain", f"epoch {epoch}: reconstruction {loss:.5f}")

    def training_epoch(self, record):
        if self.info:
            ac = f"{record.ac:.4f}" if record.ac is not None else "-"
            msg = f"{record.epoch:<4}| pred {record.pred:.4f} sp {record.sp:.3f} " \
                  f"ae {record.ae:.4f} stc {record.stc:.3f} ac {ac} | " \
                  f"val {record.val_rmse:.4f} (best {record.best_val_rmse:.4f}) " \
                  f"| feat {record.selected} | {STAT.get_brief()}"
            print(msg, flush=True)

        if not __debug__:
            return

        if self.dbg_timestamp:
            self.dbg(
                "training", f"Time: {datetime.today()} | "
                f" Duration: {(datetime.today() - self.start_time).total_seconds()} seconds")

    def training_early_stop(self, epoch: int, patience: int):
        self.inform("training", f"No validation improvement for {patience} epochs, "
                    f"stopping at epoch {epoch}")

    def training_finish(self):
        if self.info:
            now = datetime.today()
            if self.stat:
                print(STAT)
            print(f"Duration: {(now - self.start_time).total_seconds():.1f}")
            print(datetime.today().strftime('Finished at %H:%M:%S'))

    # ==============================================================================================
    # Variogram
    def dbg_variogram_fit(self, epoch: int, model, valid_bins: int):
        if not __debug__:
            return
        if not self.dbg_variogram:
            return
        self.dbg("variogram", f"epoch {epoch}: nugget={model.nugget:.4g} sill={model.sill:.4g} "
                 f"range={model.range:.4g} valid_bins={valid_bins}")

    def dbg_variogram_bins(self, label_bins, pred_bins):
        if not __debug__:
            return
        if not self.dbg_variogram:
            return
        for label_bin, pred_bin in zip(label_bins, pred_bins):
            print(f"  bin {label_bin.bin_id:<3} label N={label_bin.count:<7} "
                  f"mu={label_bin.mu:.4g} sigma={label_bin.sigma:.4g} | "
                  f"pred N={pred_bin.count}")


# ==================================================================================================
# Small helper functions
# ==================================================================================================
def format_duration(seconds: float) -> str:
    minutes, seconds = divmod(seconds, 60)
    return f"{int(minutes)}m{seconds:04.1f}s"
