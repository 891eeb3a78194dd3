#include "cdg/error.hpp"

namespace cdg {

const char* to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidInput: return "invalid input";
    case ErrorCode::PromptTooLong: return "prompt too long";
    case ErrorCode::DegenerateGraph: return "degenerate graph";
    case ErrorCode::AllHeadsFiltered: return "all heads filtered";
    case ErrorCode::InvalidRatio: return "invalid ratio";
    case ErrorCode::RankDeficient: return "rank deficient";
    case ErrorCode::UndefinedMetric: return "undefined metric";
    case ErrorCode::Config: return "config error";
    case ErrorCode::Io: return "io error";
    }
    return "error";
}

} // namespace cdg
