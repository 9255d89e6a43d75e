#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace swarm {

// Error taxonomy shared by all modules. Callers that need to tell failure
// modes apart catch the specific type; everything derives from Error.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class CapacityError : public Error {
public:
    using Error::Error;
};

class CorruptionError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class TimeoutError : public Error {
public:
    using Error::Error;
};

class ConnectionError : public Error {
public:
    using Error::Error;
};

/// Raised when a coverage gap prevents building a chain over [0, L).
class NoRouteError : public Error {
public:
    NoRouteError(std::string what, std::vector<int> missing)
        : Error(std::move(what)), missing_blocks(std::move(missing)) {}
    std::vector<int> missing_blocks;
};

class SessionError : public Error {
public:
    using Error::Error;
};

inline int64_t unix_millis() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

inline double monotonic_seconds() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

}  // namespace swarm
