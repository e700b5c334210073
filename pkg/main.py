import argparse
import sys
from modules.workflow import (RUN_DIR, SCREENING_CONFIG, SEED, TASK_TIMEOUT_MS, cmd_report_gantt, cmd_report_stats,
                              cmd_run, cmd_screen, cmd_simulate, cmd_validate, parse_pools)

U64_MAX = (1 << 64) - 1


def u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got '{text}'")
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return value


def pools_arg(text):
    try:
        return parse_pools(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog='screenflow', description="DAG workflow engine and batched virtual screening")
    commands = parser.add_subparsers(dest='command')

    validate = commands.add_parser('validate', help='Check a workflow file against every graph rule')
    validate.add_argument('workflow', help='Workflow file (.sf)')

    for name, help_text in (('run', 'Execute a workflow with real processes on the wall clock'),
                            ('simulate', 'Execute a workflow on the discrete-event clock')):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument('workflow', help='Workflow file (.sf)')
        sub.add_argument('--run-dir', default=RUN_DIR, help=f'Run directory (default: {RUN_DIR})')
        sub.add_argument('--data-dir', help='Working directory of the tasks (default: the run directory)')
        sub.add_argument('--seed', type=u64, default=SEED, help='Unsigned 64-bit run seed')
        sub.add_argument('--force', action='store_true', help='Reuse a non-empty run directory')
        sub.add_argument('--check', action='store_true', help='Replay the event log against the scheduler invariants')
        if name == 'run':
            sub.add_argument('--task-timeout', type=int, default=TASK_TIMEOUT_MS, metavar='MS',
                             help='Kill shell tasks running longer than MS (0 = no limit)')

    screen = commands.add_parser('screen', help='Run the batched virtual-screening pipeline')
    screen.add_argument('--receptor', help='Receptor file')
    screen.add_argument('--ligands', help='Ligand library (SDF)')
    screen.add_argument('--batch-size', type=positive_int, help='Ligands per batch')
    screen.add_argument('--db-name', help='Library name used in every file name')
    screen.add_argument('--pools', type=pools_arg, help='Pool sizes as small=K,large=M')
    mode = screen.add_mutually_exclusive_group()
    mode.add_argument('--mock', action='store_true', default=None, help='Deterministic mock docking')
    mode.add_argument('--docking-cmd', help='Docking command template with {index} and {outdir}')
    screen.add_argument('--top-k', type=positive_int, help='Size of the best-ligands list')
    screen.add_argument('--run-dir', default=RUN_DIR, help=f'Run directory (default: {RUN_DIR})')
    screen.add_argument('--force', action='store_true', help='Reuse a non-empty run directory')
    screen.add_argument('--config', default=SCREENING_CONFIG, help=f'Screening settings (default: {SCREENING_CONFIG})')
    screen.add_argument('--emit-spec', metavar='PATH', help="Write the screening workflow file ('-' for stdout) and exit")

    report = commands.add_parser('report', help='Render charts and statistics of a finished run')
    reports = report.add_subparsers(dest='report')
    gantt = reports.add_parser('gantt', help='Task or resource Gantt chart from an event log')
    gantt.add_argument('--mode', choices=['task', 'resource'], default='task')
    gantt.add_argument('--format', choices=['svg', 'text'], default='svg')
    gantt.add_argument('--input', required=True, help='events.log of the run')
    gantt.add_argument('--output', required=True, help='Chart file to write')
    gantt.add_argument('--pools', help='Pool sizes as name=N[,name=N] (default: workflow.sf beside the log)')
    stats = reports.add_parser('stats', help='Whiskers statistics of the PHASES timings')
    stats.add_argument('--phase', help='Single phase (default: all four)')
    stats.add_argument('--input', required=True, help='Instance log directory of the run')
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == 'validate':
        return cmd_validate(args.workflow)

    elif args.command == 'run':
        return cmd_run(args.workflow, args.run_dir, args.data_dir, args.seed, args.task_timeout, args.force,
                       check=args.check)

    elif args.command == 'simulate':
        return cmd_simulate(args.workflow, args.run_dir, args.data_dir, args.seed, args.force, args.check)

    elif args.command == 'screen':
        overrides = {
            'receptor': args.receptor,
            'ligands': args.ligands,
            'batch_size': args.batch_size,
            'db_name': args.db_name,
            'pools': args.pools,
            'mock': args.mock,
            'docking_cmd': args.docking_cmd,
            'top_k': args.top_k,
        }
        return cmd_screen(overrides, args.run_dir, args.force, args.emit_spec, args.config)

    elif args.command == 'report' and args.report == 'gantt':
        return cmd_report_gantt(args.mode, args.format, args.input, args.output, args.pools)

    elif args.command == 'report' and args.report == 'stats':
        return cmd_report_stats(args.input, args.phase)

    parser.print_help()
    return 2


if __name__ == "__main__":
    sys.exit(main())
