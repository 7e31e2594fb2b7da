fn main() {
    let code = pecrs::cli::main_entry(std::env::args_os());
    std::process::exit(code);
}
