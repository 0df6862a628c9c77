#include "curvereg/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace curvereg {

int worker_count() {
    if(const char *env = std::getenv("CURVEREG_THREADS"); env != nullptr){
        try{
            const int n = std::stoi(env);
            if(n >= 1) return n;
        }catch(const std::exception &){
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)> &body) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_count()), n);
    if(workers <= 1){
        for(std::size_t i = 0; i < n; ++i) body(i);
        return;
    }

    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    threads.reserve(workers);
    const std::size_t block = (n + workers - 1) / workers;
    for(std::size_t w = 0; w < workers; ++w){
        const std::size_t begin = w * block;
        const std::size_t end = std::min(n, begin + block);
        if(begin >= end) break;
        threads.emplace_back([&, begin, end](){
            try{
                for(std::size_t i = begin; i < end; ++i) body(i);
            }catch(...){
                std::lock_guard<std::mutex> lock(error_mutex);
                if(!first_error) first_error = std::current_exception();
            }
        });
    }
    for(auto &t : threads) t.join();
    if(first_error) std::rethrow_exception(first_error);
}

} // namespace curvereg
