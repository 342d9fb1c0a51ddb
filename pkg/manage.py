#!/usr/bin/env python
"""Command-line entry point for the latent action pretraining pipeline."""
import sys


def main():
    """Run a pipeline subcommand."""
    try:
        from latent_action_pretraining.cli import main as execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import latent_action_pretraining. Are the requirements installed "
            "and is the repository root on your PYTHONPATH?"
        ) from exc
    sys.exit(execute_from_command_line(sys.argv[1:]))


if __name__ == '__main__':
    main()
