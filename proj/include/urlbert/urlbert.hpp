#pragma once

#include "urlbert/adversarial.hpp"
#include "urlbert/corpus.hpp"
#include "urlbert/corruption.hpp"
#include "urlbert/encoder.hpp"
#include "urlbert/features.hpp"
#include "urlbert/finetune.hpp"
#include "urlbert/metrics.hpp"
#include "urlbert/objectives.hpp"
#include "urlbert/pretrain.hpp"
#include "urlbert/seed.hpp"
#include "urlbert/tokenizer.hpp"
