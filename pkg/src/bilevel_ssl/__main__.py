import sys

from .config import apply_thread_limit

apply_thread_limit()

from .cli import main  # noqa: E402

sys.exit(main())
