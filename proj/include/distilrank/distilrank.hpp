#pragma once

#include "distilrank/augment.hpp"
#include "distilrank/chat_client.hpp"
#include "distilrank/config.hpp"
#include "distilrank/distill.hpp"
#include "distilrank/error.hpp"
#include "distilrank/eval.hpp"
#include "distilrank/formats.hpp"
#include "distilrank/llm.hpp"
#include "distilrank/retrieval.hpp"
#include "distilrank/rng.hpp"
#include "distilrank/scorer.hpp"
#include "distilrank/synth.hpp"
#include "distilrank/tokenize.hpp"
#include "distilrank/train.hpp"
#include "distilrank/types.hpp"
