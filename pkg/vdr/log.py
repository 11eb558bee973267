import logging
import logging.config


def logging_settings(level: str = "INFO") -> dict:
    """Return the dictConfig used by every command."""
    return {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'plain': {
                'format': '%(name)s: %(message)s',
            },
        },
        'handlers': {
            'console': {
                'class': 'rich.logging.RichHandler',
                'formatter': 'plain',
                'rich_tracebacks': True,
                'show_path': False,
            },
        },
        'loggers': {
            'vdr': {
                'handlers': ['console'],
                'level': level,
                'propagate': False,
            },
        },
    }


def configure_logging(verbose: bool = False):
    """Install the console handler on the `vdr` logger."""
    logging.config.dictConfig(logging_settings('DEBUG' if verbose else 'INFO'))
