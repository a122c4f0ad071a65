fn main() {
    std::process::exit(sdseg_cli::app::main_with(std::env::args_os()));
}
