use std::process::ExitCode;

fn main() -> ExitCode {
    sphere_attn::cli::main()
}
