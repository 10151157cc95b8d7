from .engine import (
    InstructionRecord,
    PromptMode,
    PromptTemplate,
    Stage,
    StageOracle,
    TemplateError,
    TraceParseError,
    build_instruction_dataset,
    check_template_set,
    load_template,
    load_templates,
    parse_judgment,
    parse_trace,
    read_instruction_jsonl,
    render_fused_prompt,
    render_stage_prompt,
    write_instruction_jsonl,
)
from .oracle import RuleOracle, default_translator

__all__ = [
    "InstructionRecord",
    "PromptMode",
    "PromptTemplate",
    "RuleOracle",
    "Stage",
    "StageOracle",
    "TemplateError",
    "TraceParseError",
    "build_instruction_dataset",
    "check_template_set",
    "default_translator",
    "load_template",
    "load_templates",
    "parse_judgment",
    "parse_trace",
    "read_instruction_jsonl",
    "render_fused_prompt",
    "render_stage_prompt",
    "write_instruction_jsonl",
]
