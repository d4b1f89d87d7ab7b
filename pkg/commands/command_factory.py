"""
Factory pattern for command instantiation.
Automatically discovers and registers commands.
"""
import importlib
import logging
import pkgutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Type

from commands.base_command import BaseCommand

logger = logging.getLogger(__name__)


class CommandFactory:
    """
    Central registry for all commands.
    Automatically discovers command classes in the commands directory.
    """

    _commands: Dict[str, Type[BaseCommand]] = {}
    _initialized = False

    @classmethod
    def register(cls, command_id: str):
        """
        Decorator to register a command class.

        Usage:
            @CommandFactory.register('simulate-mra')
            class SimulateMra(BaseCommand):
                ...

        Args:
            command_id: Unique identifier typed on the command line (kebab-case)
        """
        def wrapper(command_class: Type[BaseCommand]):
            if command_id in cls._commands:
                logger.warning("Command '%s' is already registered. Overwriting.", command_id)

            cls._commands[command_id] = command_class
            logger.debug("Registered command: %s", command_id)
            return command_class
        return wrapper

    @classmethod
    def create(cls, command_id: str) -> BaseCommand:
        """
        Create an instance of the specified command.

        Raises:
            ValueError: If command_id not found
        """
        if not cls._initialized:
            cls.auto_discover()

        if command_id not in cls._commands:
            available = ', '.join(sorted(cls._commands.keys()))
            raise ValueError(
                f"Command '{command_id}' not found.\n"
                f"Available commands: {available}"
            )

        return cls._commands[command_id]()

    @classmethod
    def get_command_class(cls, command_id: str) -> Optional[Type[BaseCommand]]:
        if not cls._initialized:
            cls.auto_discover()
        return cls._commands.get(command_id)

    @classmethod
    def get_available_commands(cls) -> Dict[str, str]:
        """
        Get all available commands with their descriptions.

        Returns:
            Dict mapping command_id to description
        """
        if not cls._initialized:
            cls.auto_discover()

        return {command_id: command_class().get_description()
                for command_id, command_class in sorted(cls._commands.items())}

    @classmethod
    def get_commands_by_category(cls) -> Dict[str, List[str]]:
        """
        Group commands by category (based on module path).

        Example:
            {
                'mra': ['invert-spectral', 'moments-mra', ...],
                'cryoem': ['fit-volume', ...],
                'evaluation': ['eval-error', 'eval-fsc']
            }
        """
        if not cls._initialized:
            cls.auto_discover()

        categories: Dict[str, List[str]] = {}

        for command_id, command_class in cls._commands.items():
            # e.g. "commands.mra.simulate_mra" -> "mra"
            parts = command_class.__module__.split('.')
            if len(parts) >= 3 and parts[0] == 'commands':
                category = parts[1]
            else:
                category = 'general'
            categories.setdefault(category, []).append(command_id)

        for category in categories:
            categories[category].sort()

        return categories

    @classmethod
    def auto_discover(cls):
        """
        Import every module under commands/ so the @register decorators run.
        Safe to call repeatedly.
        """
        if cls._initialized:
            return

        import commands

        commands_path = Path(commands.__file__).parent
        for _, modname, _ in pkgutil.walk_packages(path=[str(commands_path)], prefix='commands.'):
            if any(skip in modname for skip in ['__init__', 'base_command', 'command_factory']):
                continue
            try:
                # modules already imported are reloaded so a reset() registry fills again
                if modname in sys.modules:
                    importlib.reload(sys.modules[modname])
                else:
                    importlib.import_module(modname)
            except ImportError as e:
                logger.warning("Could not import %s: %s", modname, e)

        cls._initialized = True
        logger.debug("Discovery complete. Found %d commands.", len(cls._commands))

    @classmethod
    def list_all(cls) -> str:
        """Formatted list of all commands grouped by category."""
        if not cls._initialized:
            cls.auto_discover()

        lines = ["", "=" * 60, "AVAILABLE COMMANDS", "=" * 60]
        for category, command_ids in sorted(cls.get_commands_by_category().items()):
            lines += ["", category.upper(), "-" * 60]
            for command_id in command_ids:
                lines.append(f"  {command_id:<20} {cls._commands[command_id]().get_description()}")
        lines += ["", "=" * 60, ""]
        return "\n".join(lines)

    @classmethod
    def describe(cls, command_id: str) -> str:
        """
        Description and declared outputs of one command.

        Raises:
            ValueError: If command_id not found
        """
        command_class = cls.get_command_class(command_id)
        if command_class is None:
            raise ValueError(f"Command '{command_id}' not found.")
        command = command_class()
        lines = [command_id, f"  {command.get_description()}"]
        outputs = command.get_outputs()
        if outputs:
            lines.append(f"  writes: {', '.join(outputs)}")
        return "\n".join(lines)

    @classmethod
    def reset(cls):
        """
        Reset the factory (useful for testing).
        Clears all registered commands.
        """
        cls._commands.clear()
        cls._initialized = False
