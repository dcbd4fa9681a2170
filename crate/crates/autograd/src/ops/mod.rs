mod conv;
mod elementwise;
mod layout;
mod matmul;
mod pool;
mod reduce;
mod softmax;
