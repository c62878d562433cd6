# -*- coding: utf-8 -*-
from .exceptions import SynNetError  # NOQA
from .model import (  # NOQA
    Topology,
    build_model,
)
from .persist import (  # NOQA
    RunConfig,
    load_checkpoint,
    parse_config,
    save_checkpoint,
)


__version__ = '0.1.0'
