fn main() {
    std::process::exit(mpo_adapt::commands::main_with(std::env::args_os()));
}
