#pragma once

#include "nlrf/checkpoint.hpp"
#include "nlrf/corpus.hpp"
#include "nlrf/error.hpp"
#include "nlrf/evalkit.hpp"
#include "nlrf/io.hpp"
#include "nlrf/neural.hpp"
#include "nlrf/pipeline.hpp"
#include "nlrf/random.hpp"
#include "nlrf/rules.hpp"
