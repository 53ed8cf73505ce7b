#pragma once

#include "peft/adapters/adapted_model.hpp"
#include "peft/adapters/checkpoint.hpp"
#include "peft/corpus/batches.hpp"
#include "peft/corpus/ingest.hpp"
#include "peft/corpus/tokenizer.hpp"
#include "peft/diffengine/ops.hpp"
#include "peft/encoder/checkpoint.hpp"
#include "peft/encoder/model.hpp"
#include "peft/evaluation/correlation.hpp"
#include "peft/evaluation/metrics.hpp"
#include "peft/evaluation/pppl.hpp"
#include "peft/training/language.hpp"
#include "peft/training/task.hpp"
#include "peft/verbalizer/verbalizer.hpp"
