fn main() {
    println!("segsurv");
}
