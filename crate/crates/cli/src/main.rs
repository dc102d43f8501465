fn main() {
    std::process::exit(blindguard_tool::run_cli(std::env::args_os()));
}
