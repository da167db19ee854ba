fn main() {
    std::process::exit(slotcomp::cli::main_with(std::env::args_os()));
}
