"""
Command handlers.
"""
from rpeflow.commands.gen import command as gen_command
from rpeflow.commands.train import command as train_command
from rpeflow.commands.eval import command as eval_command
from rpeflow.commands.gradcheck import command as gradcheck_command
from rpeflow.commands.viz import command as viz_command
from rpeflow.commands.ablate import command as ablate_command
from rpeflow.commands.schema import command as schema_command

__all__ = [
    "gen_command",
    "train_command",
    "eval_command",
    "gradcheck_command",
    "viz_command",
    "ablate_command",
    "schema_command",
]
