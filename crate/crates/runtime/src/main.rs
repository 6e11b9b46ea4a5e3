fn main() -> std::process::ExitCode {
    gui_agent_runtime::cli::main()
}
